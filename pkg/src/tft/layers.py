"""TFT building blocks on top of :mod:`tft.tensor`.

Weight matrices are stored input-major (``[d_in, d_out]``) and applied as
``x @ W`` so that any number of leading batch/time axes pass straight through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import RngState, Tensor

# ---------------------------------------------------------------------------
# Module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container with dotted-path names."""

    def __init__(self) -> None:
        self._params: dict[str, tuple[Tensor, str]] = {}
        self._children: dict[str, Module] = {}
        self.path = ""

    def add_param(self, name: str, shape: tuple[int, ...], init: str) -> Tensor:
        p = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self._params[name] = (p, init)
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, (p, _) in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def _named_inits(self, prefix: str = "") -> Iterator[tuple[str, Tensor, str]]:
        for name, (p, init) in self._params.items():
            yield prefix + name, p, init
        for name, child in self._children.items():
            yield from child._named_inits(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def assign_paths(self, prefix: str = "") -> None:
        self.path = prefix.rstrip(".")
        for name, child in self._children.items():
            child.assign_paths(f"{prefix}{name}.")

    def initialize(self, rng: RngState) -> None:
        """Fill every parameter from its own named random stream."""
        for name, p, init in self._named_inits():
            p.data[...] = init_array(init, p.shape, rng.generator("init/" + name))


def init_array(kind: str, shape: tuple[int, ...], gen: np.random.Generator) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "glorot":
        fan_in, fan_out = shape[-2], shape[-1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return gen.uniform(-limit, limit, size=shape)
    if kind == "embedding":
        # same scale as a Glorot 1 -> d linear map
        limit = math.sqrt(6.0 / (1 + shape[-1]))
        return gen.uniform(-limit, limit, size=shape)
    if kind == "lstm_bias":
        b = np.zeros(shape)
        hidden = shape[-1] // 4
        b[hidden : 2 * hidden] = 1.0
        return b
    raise ConfigError(f"unknown init kind {kind!r}")


# ---------------------------------------------------------------------------
# Dense pieces
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.add_param("weight", (d_in, d_out), "glorot")
        self.bias = self.add_param("bias", (d_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.path or 'linear'}: expected last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class GLU(Module):
    """sigmoid(x W4 + b4) * (x W5 + b5).

    With ``gated=False`` (the gating ablation) the unit becomes
    ``ELU(x W5 + b5)`` and owns no gate parameters.
    """

    def __init__(self, d_in: int, d_out: int, gated: bool = True):
        super().__init__()
        self.gated = gated
        self.gate = self.add_module("gate", Linear(d_in, d_out)) if gated else None
        self.value = self.add_module("value", Linear(d_in, d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if not self.gated:
            return T.elu(self.value(x))
        return T.sigmoid(self.gate(x)) * self.value(x)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = self.add_param("gain", (d,), "ones")
        self.bias = self.add_param("bias", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, axis=-1)


class GateAddNorm(Module):
    """LayerNorm(skip + GLU(dropout(x))), the gated skip connection."""

    def __init__(self, d_in: int, d_out: int, dropout: float = 0.0, gated: bool = True):
        super().__init__()
        self.dropout = dropout
        self.glu = self.add_module("glu", GLU(d_in, d_out, gated))
        self.norm = self.add_module("norm", LayerNorm(d_out))

    def __call__(self, x: Tensor, skip: Tensor, rng: RngState | None = None, training: bool = False) -> Tensor:
        x = T.dropout(x, self.dropout, rng, training, stream=self.path)
        return self.norm(skip + self.glu(x))


def _expand_context(c: Tensor, ndim: int) -> Tensor:
    """Insert singleton axes after the batch axis so ``c`` broadcasts over time."""
    if c.ndim >= ndim:
        return c
    shape = c.shape[:1] + (1,) * (ndim - c.ndim) + c.shape[1:]
    return c.reshape(shape)


class GRN(Module):
    """Gated residual network.

    ``eta2 = ELU(a W2 + c W3 + b2)``, ``eta1 = eta2 W1 + b1``,
    ``out = LayerNorm(skip(a) + GLU(dropout(eta1)))``.  ``W3`` carries no
    bias of its own; ``skip`` is a learned projection only when
    ``d_in != d_out``.
    """

    def __init__(
        self,
        d_in: int,
        d_hidden: int,
        d_out: int | None = None,
        d_ctx: int | None = None,
        dropout: float = 0.0,
        gated: bool = True,
    ):
        super().__init__()
        d_out = d_hidden if d_out is None else d_out
        self.d_in, self.d_hidden, self.d_out, self.d_ctx = d_in, d_hidden, d_out, d_ctx
        self.dropout = dropout
        self.fc2 = self.add_module("fc2", Linear(d_in, d_hidden))
        self.ctx = self.add_module("ctx", Linear(d_ctx, d_hidden, bias=False)) if d_ctx else None
        self.fc1 = self.add_module("fc1", Linear(d_hidden, d_hidden))
        self.glu = self.add_module("glu", GLU(d_hidden, d_out, gated))
        self.skip = self.add_module("skip", Linear(d_in, d_out)) if d_in != d_out else None
        self.norm = self.add_module("norm", LayerNorm(d_out))

    def __call__(
        self,
        a: Tensor,
        c: Tensor | None = None,
        rng: RngState | None = None,
        training: bool = False,
    ) -> Tensor:
        h = self.fc2(a)
        if c is not None:
            if self.ctx is None:
                raise ContractError(f"{self.path or 'GRN'} takes no context vector")
            h = h + _expand_context(self.ctx(c), h.ndim)
        eta2 = T.elu(h)
        eta1 = self.fc1(eta2)
        eta1 = T.dropout(eta1, self.dropout, rng, training, stream=self.path)
        residual = a if self.skip is None else self.skip(a)
        return self.norm(residual + self.glu(eta1))


# ---------------------------------------------------------------------------
# Variable selection and static context
# ---------------------------------------------------------------------------


class VariableSelection(Module):
    """Softmax-weighted mix of per-variable GRN outputs.

    Inputs are ``m`` tensors of shape ``[..., d]``; one GRN per variable is
    shared across every leading (batch/time) position.  ``fixed_weights``
    swaps the weight network for ``m`` trainable logits.
    """

    def __init__(
        self,
        m: int,
        d: int,
        d_ctx: int | None = None,
        dropout: float = 0.0,
        gated: bool = True,
        fixed_weights: bool = False,
    ):
        super().__init__()
        if m < 1:
            raise ConfigError("variable selection needs at least one variable")
        self.m, self.d = m, d
        self.fixed_weights = fixed_weights
        if fixed_weights:
            self.logits = self.add_param("logits", (m,), "zeros")
            self.weight_grn = None
        else:
            self.weight_grn = self.add_module(
                "weight_grn", GRN(m * d, d, m, d_ctx=d_ctx, dropout=dropout, gated=gated)
            )
        self.var_grns = [
            self.add_module(f"var{j}", GRN(d, d, d, dropout=dropout, gated=gated)) for j in range(m)
        ]

    def __call__(
        self,
        xis: list[Tensor],
        c: Tensor | None = None,
        rng: RngState | None = None,
        training: bool = False,
    ) -> tuple[Tensor, Tensor]:
        if len(xis) != self.m:
            raise DimensionError(f"{self.path}: expected {self.m} inputs, got {len(xis)}")
        if self.fixed_weights:
            weights = T.softmax(self.logits, axis=-1)
            lead = xis[0].shape[:-1]
            w = weights.reshape((1,) * len(lead) + (self.m, 1))
        else:
            flat = T.concat(xis, axis=-1)
            weights = T.softmax(self.weight_grn(flat, c, rng, training), axis=-1)
            w = weights.reshape(weights.shape + (1,))
        processed = [grn(x, None, rng, training) for grn, x in zip(self.var_grns, xis)]
        stacked = T.stack(processed, axis=-2)
        combined = T.tsum(stacked * w, axis=-2)
        return combined, weights


class StaticEncoder(Module):
    """Four independent GRNs mapping the static embedding to c_s, c_e, c_c, c_h."""

    names = ("c_s", "c_e", "c_c", "c_h")

    def __init__(self, d: int, dropout: float = 0.0, gated: bool = True):
        super().__init__()
        self.grns = {n: self.add_module(n, GRN(d, d, d, dropout=dropout, gated=gated)) for n in self.names}

    def __call__(self, zeta: Tensor, rng: RngState | None = None, training: bool = False):
        return tuple(self.grns[n](zeta, None, rng, training) for n in self.names)


# ---------------------------------------------------------------------------
# LSTM encoder-decoder (fused forward/backward)
# ---------------------------------------------------------------------------


def _sig(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _lstm_forward(x, h0, c0, wx, wh, b):
    """Standard LSTM (gate order i, f, g, o) over axis 1 of ``x``."""
    bsz, steps, _ = x.shape
    hidden = wh.shape[0]
    xz = x @ wx + b
    hs = np.empty((bsz, steps, hidden), dtype=xz.dtype)
    cache = []
    h, c = h0, c0
    for t in range(steps):
        z = xz[:, t] + h @ wh
        i = _sig(z[:, :hidden])
        f = _sig(z[:, hidden : 2 * hidden])
        g = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = _sig(z[:, 3 * hidden :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((h, c, i, f, g, o, tc))
        h, c = h_new, c_new
        hs[:, t] = h
    return hs, h, c, cache


def _lstm_backward(x, wx, wh, cache, dhs, dh_last, dc_last):
    bsz, steps, _ = x.shape
    hidden = wh.shape[0]
    dz_all = np.empty((bsz, steps, 4 * hidden), dtype=dhs.dtype)
    dwh = np.zeros_like(wh)
    dh_next, dc_next = dh_last, dc_last
    for t in reversed(range(steps)):
        h_prev, c_prev, i, f, g, o, tc = cache[t]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :hidden] = dc * g * i * (1.0 - i)
        dz[:, hidden : 2 * hidden] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
        dz[:, 3 * hidden :] = dh * tc * o * (1.0 - o)
        dwh += h_prev.T @ dz
        dh_next = dz @ wh.T
        dc_next = dc * f
    flat_dz = dz_all.reshape(-1, 4 * hidden)
    dwx = x.reshape(-1, x.shape[-1]).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz_all @ wx.T
    return dx, dh_next, dc_next, dwx, dwh, db


def lstm_encoder_decoder(
    past: Tensor,
    future: Tensor,
    c0: Tensor,
    h0: Tensor,
    enc: tuple[Tensor, Tensor, Tensor],
    dec: tuple[Tensor, Tensor, Tensor],
) -> Tensor:
    """Run the encoder over ``past`` then the decoder over ``future``.

    The encoder starts from (h0, c0); the decoder continues from the
    encoder's final state.  Returns hidden states for every position,
    shape ``[B, len(past) + len(future), H]``.
    """
    if past.shape[1] == 0:
        raise ContractError("LSTM encoder needs a non-empty past window")
    ewx, ewh, eb = (p.data for p in enc)
    dwx, dwh, db = (p.data for p in dec)
    hs_e, h_e, c_e, cache_e = _lstm_forward(past.data, h0.data, c0.data, ewx, ewh, eb)
    hs_d, _, _, cache_d = _lstm_forward(future.data, h_e, c_e, dwx, dwh, db)
    out = np.concatenate([hs_e, hs_d], axis=1)
    n_past = past.shape[1]

    def bw(g):
        zeros = np.zeros_like(h_e)
        dfut, dh, dc, gdwx, gdwh, gdb = _lstm_backward(
            future.data, dwx, dwh, cache_d, g[:, n_past:], zeros, zeros
        )
        dpast, dh0, dc0, gewx, gewh, geb = _lstm_backward(
            past.data, ewx, ewh, cache_e, g[:, :n_past], dh, dc
        )
        return dpast, dfut, dc0, dh0, gewx, gewh, geb, gdwx, gdwh, gdb

    return T.make_op(out, (past, future, c0, h0, *enc, *dec), bw, "lstm")


class LSTMSeq2Seq(Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.enc_wx = self.add_param("enc_wx", (d, 4 * d), "glorot")
        self.enc_wh = self.add_param("enc_wh", (d, 4 * d), "glorot")
        self.enc_b = self.add_param("enc_b", (4 * d,), "lstm_bias")
        self.dec_wx = self.add_param("dec_wx", (d, 4 * d), "glorot")
        self.dec_wh = self.add_param("dec_wh", (d, 4 * d), "glorot")
        self.dec_b = self.add_param("dec_b", (4 * d,), "lstm_bias")

    def __call__(self, past: Tensor, future: Tensor, c_c: Tensor, c_h: Tensor) -> Tensor:
        return lstm_encoder_decoder(
            past,
            future,
            c_c,
            c_h,
            (self.enc_wx, self.enc_wh, self.enc_b),
            (self.dec_wx, self.dec_wh, self.dec_b),
        )


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even channels, cos on odd ones."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------------------
# Interpretable multi-head attention
# ---------------------------------------------------------------------------


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n]; entry (query i, key j) allowed iff j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass
class AttentionResult:
    out: Tensor  # [B, N, d_model]
    attention: Tensor  # head-averaged weights, [B, N, N] or [N, N] when fixed
    values: Tensor  # V W_V, [B, N, d_v]
    heads: Tensor  # attention @ values, before W_H


class InterpretableMultiHead(Module):
    """Multi-head attention with one value projection shared by all heads.

    Head weight matrices are averaged before being applied once to
    ``V W_V``.  With ``fixed_positions`` set, the query/key path is replaced
    by a trainable ``[N, N]`` logit matrix (masked, row-softmaxed).
    """

    def __init__(self, d_model: int, num_heads: int, fixed_positions: int | None = None):
        super().__init__()
        if num_heads < 1 or d_model % num_heads:
            raise ConfigError(f"d_model={d_model} not divisible by num_heads={num_heads}")
        self.d_model, self.num_heads = d_model, num_heads
        self.d_attn = d_model // num_heads
        self.fixed = fixed_positions is not None
        if self.fixed:
            self.w_a = self.add_param("w_a", (fixed_positions, fixed_positions), "zeros")
        else:
            self.w_q = self.add_param("w_q", (d_model, num_heads * self.d_attn), "glorot")
            self.w_k = self.add_param("w_k", (d_model, num_heads * self.d_attn), "glorot")
        self.w_v = self.add_param("w_v", (d_model, self.d_attn), "glorot")
        self.w_h = self.add_param("w_h", (self.d_attn, d_model), "glorot")

    def head_logits(self, q: Tensor, k: Tensor) -> Tensor:
        """Scaled dot-product logits per head, shape [B, H, N, N]."""
        bsz, n, _ = q.shape
        hq = (q @ self.w_q).reshape(bsz, n, self.num_heads, self.d_attn).transpose(0, 2, 1, 3)
        hk = (k @ self.w_k).reshape(bsz, n, self.num_heads, self.d_attn).transpose(0, 2, 3, 1)
        return (hq @ hk) * (1.0 / math.sqrt(self.d_attn))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> AttentionResult:
        if self.fixed:
            attn = T.softmax(self.w_a, axis=-1, mask=mask)
        else:
            per_head = T.softmax(self.head_logits(q, k), axis=-1, mask=mask)
            attn = T.mean(per_head, axis=1)
        values = v @ self.w_v
        heads = attn @ values
        return AttentionResult(heads @ self.w_h, attn, values, heads)
