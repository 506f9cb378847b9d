"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op returns a new :class:`Tensor`; when any input requires a gradient
the result keeps references to its parents and a closure mapping the output
gradient to one gradient per parent.  :func:`backward` walks the resulting
DAG in reverse topological order.

Shapes follow numpy broadcasting for the elementwise ops; gradients are summed
back onto the broadcast operand's shape.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, GraphError, NumericError

__all__ = [
    "Tensor",
    "RngState",
    "no_grad",
    "is_grad_enabled",
    "extended_precision",
    "make_op",
    "backward",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "elu",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "layer_norm",
    "dropout",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "stack",
    "embedding",
]

_GRAD_ENABLED = True
_DTYPE = np.float64
# Checking every op output for NaN/Inf keeps failures close to their source.
CHECK_FINITE = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def extended_precision():
    """Build new tensors as ``np.longdouble`` (80-bit on x86) inside the block.

    Only meant for numerical oracles such as finite differences; callers
    must also cast any parameter arrays they want evaluated at that width.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.longdouble
    try:
        yield
    finally:
        _DTYPE = prev


@dataclass(frozen=True)
class RngState:
    """Counter-based random state.

    Each named stream gets its own Philox key derived from ``(seed, stream,
    step)``, so a dropout mask depends only on where it is drawn and at which
    training step, never on how many draws happened before it.
    """

    seed: int
    step: int = 0
    algorithm: str = "philox"

    def generator(self, stream: str) -> np.random.Generator:
        key = np.random.SeedSequence(
            [self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode()), self.step]
        )
        return np.random.Generator(np.random.Philox(key))

    def at_step(self, step: int) -> "RngState":
        return RngState(self.seed, step, self.algorithm)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    # let numpy defer to Tensor's reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a Tensor is not needed by any layer")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str = "op",
) -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are needed.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, already reduced to that parent's shape.
    """
    if CHECK_FINITE and not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NumericError(op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reached.

    Intermediate gradients are freed as soon as they have been propagated and
    the graph is marked consumed; running backward again without a fresh
    forward pass raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy-style batch broadcasting.

    A rank-1 ``b`` is not accepted; every layer multiplies by a matrix.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold batch axes into one product instead of summing a stack
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_op(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    """Hadamard product (or scaling by a constant)."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = _as_tensor(a)
        c = float(b)
        return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), bw, "hadamard")


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    x = _as_tensor(x)
    xd = x.data
    neg = xd < 0
    e = np.exp(np.minimum(xd, 0.0))
    out = np.where(neg, e - 1.0, xd)
    return make_op(out, (x,), lambda g: (np.where(neg, g * e, g),), "elu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


_ELEMENTWISE = {
    "add": add,
    "hadamard": mul,
    "elu": elu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` with max-subtraction.

    ``mask`` (broadcastable boolean, True = allowed) pushes disallowed logits
    to -1e9 and then zeroes their outputs exactly.
    """
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -1e9)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = e * mask
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), bw, "softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Standardise ``x`` along ``axis`` then apply the learned affine pair."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match axis size {n}"
        )
    bshape = (n,) + (1,) * (x.ndim - axis - 1)
    gd, bd = gain.data.reshape(bshape), bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = xhat * gd + bd
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        gbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return gx, ggain, gbias

    return make_op(out, (x, gain, bias), bw, "layer_norm")


def dropout(
    x: Tensor,
    rate: float,
    rng: RngState | None,
    training: bool,
    stream: str = "dropout",
) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an RngState")
    keep = rng.generator(stream).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return make_op(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_op(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    advanced = _is_advanced(index)

    def bw(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(x.data[index], (x,), bw, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack of an empty list")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack shape mismatch: {[t.shape for t in tensors]}") from exc

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op(out, tensors, bw, "stack")


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; gradients scatter-add into the table."""
    index = np.asarray(index, dtype=np.int64)
    vocab = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= vocab):
        raise DimensionError(f"embedding index out of range for vocabulary {vocab}")
    dim = table.shape[1]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, dim))
        return (full,)

    return make_op(table.data[index], (table,), bw, "embedding")
