import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tft import tensor as T
from tft.data import EntitySeries, make_windows
from tft.errors import ConfigError, ContractError, DataError
from tft.model import TFTConfig, TFTModel, VariableSpec
from tft.tensor import Tensor
from tft.training import (
    Adam,
    SearchSpace,
    TrainConfig,
    clip_grad_norm,
    evaluate_loss,
    fit,
    global_norm,
    pinball,
    predict,
    q_risk,
    quantile_crossings,
    quantile_loss,
    random_search,
)

reals = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def QL(y, yhat, q):
    return quantile_loss(np.array([[y]]), Tensor([[[yhat]]]), [q]).item()


# -- quantile loss ----------------------------------------------------------------


def test_quantile_loss_point_values():
    assert QL(1.0, 0.0, 0.9) == pytest.approx(0.9, abs=1e-15)
    assert QL(0.0, 1.0, 0.9) == pytest.approx(0.1, abs=1e-15)
    assert QL(3.5, 3.5, 0.3) == 0.0


def test_quantile_loss_sums_quantiles_and_averages_points():
    y = np.array([[1.0, 2.0], [0.0, -1.0]])
    yhat = np.stack([y - 1.0, y + 2.0], axis=-1)
    # q=0.1 under-predicts by 1 everywhere, q=0.9 over-predicts by 2
    expected = 0.1 * 1.0 + (1 - 0.9) * 2.0
    assert quantile_loss(y, Tensor(yhat), [0.1, 0.9]).item() == pytest.approx(expected, abs=1e-15)


def test_quantile_loss_rejects_bad_quantiles_and_shapes():
    with pytest.raises(ConfigError):
        quantile_loss(np.zeros((1, 2)), Tensor(np.zeros((1, 2, 1))), [1.0])
    with pytest.raises(ConfigError):
        quantile_loss(np.zeros((1, 2)), Tensor(np.zeros((1, 3, 1))), [0.5])
    with pytest.raises(ConfigError):
        pinball(1.0, 0.0, 0.0)


@given(reals, reals, st.floats(0.01, 0.99))
def test_quantile_loss_nonnegative_and_zero_at_target(y, yhat, q):
    assert QL(y, yhat, q) >= 0
    assert QL(y, y, q) == 0.0


@given(arrays(np.float64, (3, 2), elements=reals), st.floats(0.01, 0.99))
def test_quantile_loss_gradient_is_quantile_indicator(y, q):
    rng = np.random.default_rng(0)
    yhat = Tensor(y[..., None] + rng.choice([-1.0, 1.0], size=(3, 2, 1)), requires_grad=True)
    T.backward(quantile_loss(y, yhat, [q]))
    under = yhat.data[..., 0] < y
    expected = np.where(under, -q, 1 - q) / y.size
    np.testing.assert_allclose(yhat.grad[..., 0], expected, atol=1e-15)


@given(arrays(np.float64, 6, elements=reals), arrays(np.float64, 6, elements=reals), st.floats(0.01, 1e3))
def test_pinball_scales_linearly(y, yhat, c):
    np.testing.assert_allclose(pinball(c * y, c * yhat, 0.7), c * pinball(y, yhat, 0.7), rtol=1e-12, atol=1e-9)


# -- q-risk -----------------------------------------------------------------------------


def test_q_risk_examples():
    y = np.array([1.0, -2.0, 3.0])
    assert q_risk(y, y, 0.5) == 0.0
    assert q_risk([2.0], [1.0], 0.5) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DataError):
        q_risk([0.0, 0.0], [1.0, 1.0], 0.5)


def test_q_risk_matches_loop_evaluator():
    rng = np.random.default_rng(1)
    y, yhat = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    for q in (0.1, 0.5, 0.9):
        num = 0.0
        den = 0.0
        for a, f in zip(y.ravel().tolist(), yhat.ravel().tolist()):
            num += q * max(a - f, 0.0) + (1 - q) * max(f - a, 0.0)
            den += abs(a)
        assert abs(q_risk(y, yhat, q) - 2 * num / den) < 1e-12


def test_quantile_crossings_counts_pairs():
    f = np.array([[[0.0, 1.0, 2.0], [1.0, 0.5, 2.0]], [[3.0, 2.0, 1.0], [0.0, 0.0, 0.0]]])
    assert quantile_crossings(f) == 2


# -- clipping and Adam ----------------------------------------------------------------------


def test_clip_examples():
    small = [np.array([0.1, 0.2])]
    assert clip_grad_norm(small, 1.0)[0] is small[0]
    np.testing.assert_allclose(clip_grad_norm([np.array([3.0, 4.0])], 1.0)[0], [0.6, 0.8], atol=1e-15)
    with pytest.raises(ConfigError):
        clip_grad_norm(small, 0.0)


@given(
    st.lists(arrays(np.float64, st.integers(1, 5), elements=reals), min_size=1, max_size=4),
    st.floats(1e-3, 100.0),
)
def test_clip_bounds_global_norm_and_preserves_direction(grads, max_norm):
    clipped = clip_grad_norm(grads, max_norm)
    assert global_norm(clipped) <= max_norm + 1e-12
    n = global_norm(grads)
    if n > max_norm:
        for g, c in zip(grads, clipped):
            np.testing.assert_allclose(c, g * (max_norm / n), rtol=1e-12)


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    opt = Adam([p], lr=0.01)
    g = np.array([2.0, -3.0, 1e-3])
    opt.step([g])
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0, -1.0, 0.5] - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.step([2 * p.data])
    assert np.abs(p.data).max() < 1e-2


# -- fit ---------------------------------------------------------------------------------------


def linear_windows(n, entity, slope=0.02, offset=0.0):
    k, tau = 4, 2
    t = np.arange(n + k + tau)
    s = EntitySeries(
        entity=entity,
        static=np.zeros(0),
        times=t,
        target=slope * t - 1.0 + offset,
        observed=np.zeros((len(t), 0)),
        known=(t / len(t))[:, None],
    )
    return make_windows([s], k, tau)


LINEAR_CFG = TFTConfig(
    k=4,
    tau_max=2,
    d_model=8,
    num_heads=1,
    past_vars=(VariableSpec("y"), VariableSpec("x")),
    future_vars=(VariableSpec("x"),),
)


@pytest.fixture(scope="module")
def linear_data():
    train = linear_windows(100, "a")
    val = linear_windows(20, "b", offset=0.3)
    assert len(train) == 100
    return train, val


def test_zero_learning_rate_leaves_parameters_bit_identical(linear_data):
    train, val = linear_data
    model = TFTModel(LINEAR_CFG, seed=0)
    before = model.state_dict()
    fit(model, train, val, TrainConfig(learning_rate=0.0, max_epochs=3, batch_size=32))
    after = model.state_dict()
    assert all(np.array_equal(before[n], after[n]) for n in before)


def test_training_loss_decreases_over_first_five_epochs(linear_data):
    train, val = linear_data
    model = TFTModel(LINEAR_CFG, seed=0)
    _, hist = fit(model, train, val, TrainConfig(max_epochs=5, patience=10))
    losses = hist.train_losses
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_fit_is_deterministic(linear_data, tmp_path):
    train, val = linear_data
    runs = []
    for i in range(2):
        model = TFTModel(LINEAR_CFG, seed=4)
        log = tmp_path / f"h{i}.jsonl"
        _, hist = fit(model, train, val, TrainConfig(max_epochs=3, seed=9), log_path=log, log_wall_time=False)
        runs.append((hist.train_losses, hist.val_losses, log.read_bytes(), model.state_dict()))
    assert runs[0][:3] == runs[1][:3]
    assert all(np.array_equal(runs[0][3][n], runs[1][3][n]) for n in runs[0][3])


def test_fit_restores_best_weights_and_stops_early(linear_data):
    train, val = linear_data
    model = TFTModel(LINEAR_CFG, seed=1)
    _, hist = fit(model, train, val, TrainConfig(learning_rate=0.3, max_epochs=40, patience=2, max_grad_norm=100.0))
    assert hist.best_val_loss == min(hist.val_losses)
    assert evaluate_loss(model, val) == pytest.approx(hist.best_val_loss, rel=1e-12)
    if hist.stopped_early:
        assert len(hist.epochs) - 1 - hist.best_epoch == 2


def test_fit_rejects_overlap_and_empty_sets(linear_data):
    train, val = linear_data
    model = TFTModel(LINEAR_CFG)
    with pytest.raises(ContractError):
        fit(model, train, train[:3], TrainConfig(max_epochs=1))
    with pytest.raises(DataError):
        fit(model, train, [], TrainConfig(max_epochs=1))


def test_predict_batches_concatenate(linear_data):
    train, _ = linear_data
    model = TFTModel(LINEAR_CFG)
    whole = predict(model, train[:10], batch_size=64)
    pieces = predict(model, train[:10], batch_size=3)
    np.testing.assert_allclose(whole.forecasts, pieces.forecasts, atol=1e-14)
    assert pieces.attention.shape == (10, 7, 7)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(max_grad_norm=0.0), dict(learning_rate=-1.0)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- random search -------------------------------------------------------------------------


def test_search_draws_stay_in_grid():
    space = SearchSpace()
    gen = np.random.default_rng(0)
    for _ in range(200):
        d = space.draw(gen)
        assert d["d_model"] in space.state_sizes
        assert d["dropout"] in space.dropout_rates
        assert d["batch_size"] in space.minibatch_sizes
        assert d["learning_rate"] in space.learning_rates
        assert d["max_grad_norm"] in space.max_grad_norms
        assert d["num_heads"] in space.num_heads and d["d_model"] % d["num_heads"] == 0


SMALL_SPACE = SearchSpace(state_sizes=(4, 8), minibatch_sizes=(32, 64), num_heads=(1, 2))


def test_search_budget_one(linear_data):
    train, val = linear_data
    trials = random_search(SMALL_SPACE, train, val, LINEAR_CFG, TrainConfig(max_epochs=1), budget=1)
    assert len(trials) == 1


def test_search_ranked_and_reproducible(linear_data):
    train, val = linear_data
    run = lambda: random_search(SMALL_SPACE, train, val, LINEAR_CFG, TrainConfig(max_epochs=2), budget=3, seed=5)
    trials = run()
    losses = [t.val_loss for t in trials]
    assert losses == sorted(losses)
    assert [(t.index, t.params, t.val_loss) for t in run()] == [(t.index, t.params, t.val_loss) for t in trials]


def test_search_budget_must_be_positive(linear_data):
    train, val = linear_data
    with pytest.raises(ConfigError):
        random_search(SMALL_SPACE, train, val, LINEAR_CFG, TrainConfig(), budget=0)


def test_restore_best_off_keeps_last_epoch(linear_data):
    train, val = linear_data
    cfg = TrainConfig(learning_rate=0.05, max_epochs=6, patience=10, restore_best=False)
    model, hist = fit(TFTModel(LINEAR_CFG, seed=2), train, val, cfg)
    assert evaluate_loss(model, val) == pytest.approx(hist.val_losses[-1], rel=1e-12)
