"""Full Temporal Fusion Transformer assembly.

Pipeline per forecast: embed every input to ``d_model``; static variable
selection and the four static contexts; past/future variable selection;
LSTM encoder-decoder with a gated skip; static enrichment; causal
interpretable attention with a gated skip; position-wise GRN; a gated skip
over the whole attention block; one linear head per quantile on the future
positions.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .layers import (
    GRN,
    GateAddNorm,
    InterpretableMultiHead,
    Linear,
    LSTMSeq2Seq,
    Module,
    StaticEncoder,
    VariableSelection,
    causal_mask,
    positional_encoding,
)
from .tensor import RngState, Tensor

ABLATION_FLAGS = (
    "no_gating",
    "no_static_encoders",
    "fixed_variable_weights",
    "fixed_attention",
    "positional_encoding_instead_of_lstm",
)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str = "real"  # "real" | "categorical"
    cardinality: int = 0

    def __post_init__(self):
        if self.kind not in ("real", "categorical"):
            raise ConfigError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and self.cardinality < 1:
            raise ConfigError(f"categorical variable {self.name!r} needs cardinality >= 1")


@dataclass(frozen=True)
class Ablations:
    no_gating: bool = False
    no_static_encoders: bool = False
    fixed_variable_weights: bool = False
    fixed_attention: bool = False
    positional_encoding_instead_of_lstm: bool = False

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "Ablations":
        unknown = set(names) - set(ABLATION_FLAGS)
        if unknown:
            raise ConfigError(f"unknown ablation flag(s): {sorted(unknown)}")
        return cls(**{n: True for n in names})

    def active(self) -> list[str]:
        return [n for n in ABLATION_FLAGS if getattr(self, n)]


@dataclass(frozen=True)
class TFTConfig:
    k: int
    tau_max: int
    d_model: int = 16
    num_heads: int = 1
    dropout: float = 0.1
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    static_vars: tuple[VariableSpec, ...] = ()
    past_vars: tuple[VariableSpec, ...] = (VariableSpec("target"),)
    future_vars: tuple[VariableSpec, ...] = ()
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.tau_max < 1:
            raise ConfigError("tau_max must be >= 1")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        q = np.asarray(self.quantiles, dtype=float)
        if q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ConfigError(f"quantiles must be strictly increasing inside (0, 1): {self.quantiles}")
        if not self.past_vars:
            raise ConfigError("at least one past input (the target) is required")

    @property
    def n_positions(self) -> int:
        return self.k + 1 + self.tau_max

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        d["ablations"] = self.ablations.active()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TFTConfig":
        d = dict(d)
        for group in ("static_vars", "past_vars", "future_vars"):
            d[group] = tuple(VariableSpec(**v) for v in d.get(group, ()))
        d["quantiles"] = tuple(d.get("quantiles", (0.1, 0.5, 0.9)))
        d["ablations"] = Ablations.from_names(d.get("ablations", ()))
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Batch:
    """Model inputs for B windows; categorical columns hold integer codes."""

    static: np.ndarray  # [B, m_static]
    past: np.ndarray  # [B, k+1, m_past]
    future: np.ndarray  # [B, tau_max, m_future]
    target: np.ndarray | None = None  # [B, tau_max]

    def __len__(self) -> int:
        return self.past.shape[0]


@dataclass
class ForecastOutput:
    """Forecasts plus the interpretability tensors for a batch.

    ``yhat`` is a graph tensor (so a loss can be built on it); everything else
    is plain numpy.  ``vsn_static`` is None when there are no static inputs
    or the static encoders are ablated.
    """

    yhat: Tensor  # [B, tau_max, |Q|]
    attention: np.ndarray  # [B, N, N]
    vsn_static: np.ndarray | None  # [B, m_static]
    vsn_past: np.ndarray  # [B, k+1, m_past]
    vsn_future: np.ndarray | None  # [B, tau_max, m_future]
    internals: dict | None = None

    @property
    def forecasts(self) -> np.ndarray:
        return self.yhat.data


class _Embedding(Module):
    """Entity embedding for categoricals (code 0 = unknown) or a 1 -> d map."""

    def __init__(self, spec: VariableSpec, d: int):
        super().__init__()
        self.spec = spec
        if spec.kind == "categorical":
            self.table = self.add_param("table", (spec.cardinality + 1, d), "embedding")
            self.linear = None
        else:
            self.table = None
            self.linear = self.add_module("linear", Linear(1, d))

    def __call__(self, column: np.ndarray) -> Tensor:
        if self.table is not None:
            return T.embedding(self.table, np.rint(column).astype(np.int64))
        return self.linear(Tensor(column[..., None]))


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except NumericError as exc:
        raise NumericError(name, f"non-finite values (op '{exc.stage}')") from exc


def _check(name: str, x: Tensor) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(name)


class TFTModel(Module):
    def __init__(self, config: TFTConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        cfg, ab = config, config.ablations
        d, p = cfg.d_model, cfg.dropout
        gated = not ab.no_gating
        m_s, m_p, m_f = len(cfg.static_vars), len(cfg.past_vars), len(cfg.future_vars)
        self.use_static = m_s > 0 and not ab.no_static_encoders
        # with the encoders ablated, static embeddings join every temporal step
        extra = m_s if (ab.no_static_encoders and m_s > 0) else 0

        self.static_emb = [self.add_module(f"static_emb{j}", _Embedding(v, d)) for j, v in enumerate(cfg.static_vars)]
        self.past_emb = [self.add_module(f"past_emb{j}", _Embedding(v, d)) for j, v in enumerate(cfg.past_vars)]
        self.future_emb = [self.add_module(f"future_emb{j}", _Embedding(v, d)) for j, v in enumerate(cfg.future_vars)]

        vsn = dict(dropout=p, gated=gated, fixed_weights=ab.fixed_variable_weights)
        ctx = d if self.use_static else None
        self.static_vsn = self.add_module("static_vsn", VariableSelection(m_s, d, None, **vsn)) if self.use_static else None
        self.static_encoder = self.add_module("static_encoder", StaticEncoder(d, p, gated)) if self.use_static else None
        self.past_vsn = self.add_module("past_vsn", VariableSelection(m_p + extra, d, ctx, **vsn))
        self.future_vsn = (
            self.add_module("future_vsn", VariableSelection(m_f + extra, d, ctx, **vsn)) if m_f + extra > 0 else None
        )
        self.seq2seq = None if ab.positional_encoding_instead_of_lstm else self.add_module("seq2seq", LSTMSeq2Seq(d))
        self.post_seq2seq = self.add_module("post_seq2seq", GateAddNorm(d, d, p, gated))
        self.enrichment = self.add_module("enrichment", GRN(d, d, d, d_ctx=ctx, dropout=p, gated=gated))
        self.attention = self.add_module(
            "attention",
            InterpretableMultiHead(d, cfg.num_heads, cfg.n_positions if ab.fixed_attention else None),
        )
        self.post_attention = self.add_module("post_attention", GateAddNorm(d, d, p, gated))
        self.positionwise = self.add_module("positionwise", GRN(d, d, d, dropout=p, gated=gated))
        self.final_gate = self.add_module("final_gate", GateAddNorm(d, d, 0.0, gated))
        self.head = self.add_module("head", Linear(d, len(cfg.quantiles)))

        self.mask = causal_mask(cfg.n_positions)
        self.assign_paths()
        self.initialize(RngState(seed))

    # ------------------------------------------------------------------
    def _embed(self, embs, cols: np.ndarray) -> list[Tensor]:
        return [emb(cols[..., j]) for j, emb in enumerate(embs)]

    def _validate(self, batch: Batch) -> None:
        cfg = self.config
        b = len(batch)
        expect = {
            "static": (b, len(cfg.static_vars)),
            "past": (b, cfg.k + 1, len(cfg.past_vars)),
            "future": (b, cfg.tau_max, len(cfg.future_vars)),
        }
        for name, shape in expect.items():
            got = getattr(batch, name).shape
            if got != shape:
                raise DimensionError(f"batch.{name} has shape {got}, model expects {shape}")

    def __call__(
        self,
        batch: Batch,
        rng: RngState | None = None,
        training: bool = False,
        keep_internals: bool = False,
    ) -> ForecastOutput:
        return self.forward(batch, rng, training, keep_internals)

    def forward(
        self,
        batch: Batch,
        rng: RngState | None = None,
        training: bool = False,
        keep_internals: bool = False,
    ) -> ForecastOutput:
        self._validate(batch)
        cfg = self.config
        bsz, k1, tau, d = len(batch), cfg.k + 1, cfg.tau_max, cfg.d_model

        with _stage("embedding"):
            static_xi = self._embed(self.static_emb, batch.static)
            past_xi = self._embed(self.past_emb, batch.past)
            future_xi = self._embed(self.future_emb, batch.future)

        c_s = c_e = c_c = c_h = None
        vsn_static = None
        with _stage("static_encoder"):
            if self.use_static:
                zeta, w_static = self.static_vsn(static_xi, None, rng, training)
                c_s, c_e, c_c, c_h = self.static_encoder(zeta, rng, training)
                vsn_static = np.broadcast_to(w_static.data, (bsz, len(static_xi))).copy()
            elif static_xi:
                past_xi += [s.reshape(bsz, 1, d) + np.zeros((bsz, k1, d)) for s in static_xi]
                future_xi += [s.reshape(bsz, 1, d) + np.zeros((bsz, tau, d)) for s in static_xi]

        with _stage("variable_selection"):
            past_sel, w_past = self.past_vsn(past_xi, c_s, rng, training)
            if self.future_vsn is not None:
                future_sel, w_future = self.future_vsn(future_xi, c_s, rng, training)
            else:
                future_sel, w_future = Tensor(np.zeros((bsz, tau, d))), None
            _check("variable_selection", past_sel)

        with _stage("seq2seq"):
            selected = T.concat([past_sel, future_sel], axis=1)
            if self.seq2seq is None:
                phi = selected + positional_encoding(cfg.n_positions, d)
            else:
                zeros = Tensor(np.zeros((bsz, d)))
                phi = self.seq2seq(
                    past_sel,
                    future_sel,
                    zeros if c_c is None else c_c,
                    zeros if c_h is None else c_h,
                )
            phi_tilde = self.post_seq2seq(phi, selected, rng, training)

        with _stage("static_enrichment"):
            theta = self.enrichment(phi_tilde, c_e, rng, training)

        with _stage("attention"):
            att = self.attention(theta, theta, theta, self.mask)
            delta = self.post_attention(att.out, theta, rng, training)

        with _stage("positionwise"):
            psi = self.positionwise(delta, None, rng, training)
            psi_tilde = self.final_gate(psi, phi_tilde, rng, training)

        with _stage("quantile_head"):
            yhat = self.head(psi_tilde[:, k1:, :])
            _check("quantile_head", yhat)

        attention = np.broadcast_to(att.attention.data, (bsz,) + self.mask.shape).copy()
        w_past_np = w_past.data
        if w_past_np.ndim == 1:
            w_past_np = np.broadcast_to(w_past_np, (bsz, k1, w_past_np.size)).copy()
        w_future_np = None
        if w_future is not None:
            w_future_np = w_future.data
            if w_future_np.ndim == 1:
                w_future_np = np.broadcast_to(w_future_np, (bsz, tau, w_future_np.size)).copy()

        internals = None
        if keep_internals:
            internals = {
                "theta": theta.data,
                "values": att.values.data,
                "heads": att.heads.data,
                "attention_out": att.out.data,
                "phi_tilde": phi_tilde.data,
                "psi_tilde": psi_tilde.data,
                "contexts": None if c_s is None else tuple(c.data for c in (c_s, c_e, c_c, c_h)),
            }
        return ForecastOutput(yhat, attention, vsn_static, w_past_np, w_future_np, internals)

    # ------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict and set(params) != set(state):
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            raise ConfigError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if name not in params:
                continue
            if params[name].shape != arr.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {params[name].shape}")
            params[name].data[...] = arr


def apply_ablation(model: TFTModel, flags: Ablations | Sequence[str]) -> TFTModel:
    """Rebuild ``model`` with ``flags`` switched on.

    Parameters whose name and shape survive the change are copied over;
    replacement components (fixed weights, ``W_A``, ungated units, widened
    selection networks) start from their seeded initialisation.
    """
    if not isinstance(flags, Ablations):
        flags = Ablations.from_names(list(flags))
    new = TFTModel(replace(model.config, ablations=flags), seed=model.seed)
    old = dict(model.named_parameters())
    for name, p in new.named_parameters():
        if name in old and old[name].shape == p.shape:
            p.data[...] = old[name].data
    return new
