import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tft import tensor as T
from tft.errors import ConfigError, ContractError, DimensionError, GraphError, NumericError
from tft.gradcheck import check_gradients, relative_error
from tft.tensor import RngState, Tensor

from helpers import max_rel_err, numeric_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)


def test_matmul_hand_product():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    w = rng.normal(size=(4, 3))

    def f():
        return T.tsum((a @ b) * w)

    T.backward(f())
    assert max_rel_err(a.grad, numeric_grad(lambda: f().item(), a.data)) < 1e-6
    assert max_rel_err(b.grad, numeric_grad(lambda: f().item(), b.data)) < 1e-6


def test_batched_matmul_weight_gradient_folds_batch():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    T.backward(T.tsum(a @ b))
    np.testing.assert_allclose(b.grad, a.data.reshape(-1, 4).sum(0)[:, None].repeat(5, 1), atol=1e-12)


# -- elementwise -----------------------------------------------------------


def test_elu_values():
    assert T.elu(Tensor(0.0)).item() == 0.0
    assert T.elu(Tensor(1.0)).item() == 1.0
    assert abs(T.elu(Tensor(-20.0)).item() + 1.0) < 1e-8


def test_sigmoid_half_at_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extreme_inputs_stay_finite():
    out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_elementwise_dispatch_and_unknown_kind():
    x = Tensor([1.0, -2.0])
    np.testing.assert_array_equal(T.elementwise("hadamard", x, x).data, [1.0, 4.0])
    np.testing.assert_array_equal(T.elementwise("tanh", x).data, np.tanh([1.0, -2.0]))
    with pytest.raises(ConfigError):
        T.elementwise("cube", x)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


@pytest.mark.parametrize("op", [T.elu, T.sigmoid, T.tanh])
def test_unary_gradients(op):
    x = leaf(np.random.default_rng(2).normal(size=7) * 2)
    T.backward(T.tsum(op(x)))
    assert max_rel_err(x.grad, numeric_grad(lambda: T.tsum(op(x)).item(), x.data)) < 1e-6


def test_broadcast_add_reduces_gradient_to_operand_shape():
    x, b = leaf(np.ones((3, 4))), leaf(np.zeros(4))
    T.backward(T.tsum(x + b))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


# -- softmax ----------------------------------------------------------------


def test_softmax_uniform_and_stable():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=7))
    w = rng.normal(size=7)
    T.backward(T.tsum(T.softmax(x) * w))
    num = numeric_grad(lambda: T.tsum(T.softmax(x) * w).item(), x.data)
    assert max_rel_err(x.grad, num) < 1e-6


def test_softmax_mask_gives_exact_zeros():
    mask = np.tril(np.ones((3, 3), dtype=bool))
    out = T.softmax(Tensor(np.random.default_rng(4).normal(size=(3, 3))), mask=mask).data
    assert (out[~mask] == 0.0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_on_simplex(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)


# -- layer norm --------------------------------------------------------------


def test_layer_norm_constant_slice_is_zero():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_standardized_pair():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)
    # epsilon sits inside the square root
    np.testing.assert_allclose(out[0], 1.0 / np.sqrt(1.0 + 1e-5), rtol=1e-15)


def test_layer_norm_slice_statistics():
    x = np.random.default_rng(5).normal(size=(3, 8)) * 3 + 2
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(-1)).max() < 1e-9
    assert np.abs(out.var(-1) - 1).max() < 1e-4


def test_layer_norm_gradients():
    rng = np.random.default_rng(6)
    x, g, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = rng.normal(size=(3, 5))

    def f():
        return T.tsum(T.layer_norm(x, g, b) * w)

    T.backward(f())
    for p in (x, g, b):
        assert max_rel_err(p.grad, numeric_grad(lambda: f().item(), p.data)) < 1e-6


def test_layer_norm_shape_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- dropout ------------------------------------------------------------------


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    assert T.dropout(x, 0.0, RngState(0), True) is x
    assert T.dropout(x, 0.5, RngState(0), False) is x


def test_dropout_rate_one_rejected():
    with pytest.raises(ConfigError):
        T.dropout(Tensor(np.ones(3)), 1.0, RngState(0), True)


def test_dropout_statistics():
    x = Tensor(np.ones(100_000))
    out = T.dropout(x, 0.5, RngState(7), True).data
    assert abs((out > 0).mean() - 0.5) < 0.01
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_masks_depend_on_seed_stream_and_step_only():
    x = Tensor(np.ones(50))
    a = T.dropout(x, 0.3, RngState(1, step=4), True, stream="a").data
    assert np.array_equal(a, T.dropout(x, 0.3, RngState(1, step=4), True, stream="a").data)
    assert not np.array_equal(a, T.dropout(x, 0.3, RngState(1, step=5), True, stream="a").data)
    assert not np.array_equal(a, T.dropout(x, 0.3, RngState(1, step=4), True, stream="b").data)


# -- graph ---------------------------------------------------------------------


def test_backward_sum_and_square():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = leaf([2.0, -3.0])
    T.backward(T.tsum(y * y))
    np.testing.assert_array_equal(y.grad, [4.0, -6.0])


def test_backward_accumulates_over_paths():
    x = leaf([3.0])
    T.backward(T.tsum(x * x + x))
    np.testing.assert_array_equal(x.grad, [7.0])


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_second_backward_rejected():
    x = leaf([1.0, 2.0])
    loss = T.tsum(x * x)
    T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(loss)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_output_from_finite_input_raises():
    with pytest.raises(NumericError, match="matmul"):
        T.matmul(Tensor([[1e200]]), Tensor([[1e200]]))


def test_getitem_and_concat_gradients():
    rng = np.random.default_rng(8)
    x = leaf(rng.normal(size=(3, 4)))
    y = leaf(rng.normal(size=(3, 2)))

    def f():
        z = T.concat([x, y], axis=-1)
        return T.tsum(z[:, 1:5] * z[:, 1:5]) + T.tsum(z[np.array([0, 0, 2])])

    T.backward(f())
    assert max_rel_err(x.grad, numeric_grad(lambda: f().item(), x.data)) < 1e-6
    assert max_rel_err(y.grad, numeric_grad(lambda: f().item(), y.data)) < 1e-6


def test_embedding_scatter_adds_repeated_rows():
    table = leaf(np.arange(6.0).reshape(3, 2))
    out = T.embedding(table, np.array([[2, 2], [0, 1]]))
    np.testing.assert_array_equal(out.data[0, 0], [4.0, 5.0])
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(table.grad, [[1, 1], [1, 1], [2, 2]])


@given(
    arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
    st.integers(0, 2**32 - 1),
)
def test_determinism_same_inputs_same_values_and_grads(x, seed):
    def run():
        a = leaf(x)
        out = T.tsum(T.dropout(T.tanh(a), 0.3, RngState(seed), True, stream="s") * 1.5)
        T.backward(out)
        return out.data, a.grad

    (o1, g1), (o2, g2) = run(), run()
    assert np.array_equal(o1, o2) and np.array_equal(g1, g2)


# -- gradcheck utility ------------------------------------------------------------


def test_relative_error_mask():
    assert relative_error(np.array([1e-9, 1.0]), np.array([2e-9, 1.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([3.0])) == 0.5


def test_extended_precision_oracle_agrees_with_float64_on_well_scaled_problem():
    rng = np.random.default_rng(9)
    w = leaf(rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))

    def loss():
        return T.tsum(T.tanh(T.matmul(Tensor(x), w)))

    for extended in (False, True):
        (res,) = check_gradients(loss, [("w", w)], extended=extended)
        assert res.ok, res
    assert w.data.dtype == np.float64
