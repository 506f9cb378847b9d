"""Quantile-loss training: Adam, global-norm clipping, early stopping, search."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import WindowedSample, collate
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import ForecastOutput, TFTConfig, TFTModel
from .tensor import RngState, Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def _check_quantiles(quantiles) -> np.ndarray:
    q = np.asarray(quantiles, dtype=float).reshape(-1)
    if q.size == 0 or np.any(q <= 0) or np.any(q >= 1):
        raise ConfigError(f"quantiles must lie strictly inside (0, 1): {list(q)}")
    return q


def pinball(y, yhat, q: float) -> np.ndarray:
    """QL(y, yhat, q) = q (y - yhat)+ + (1 - q) (yhat - y)+, elementwise."""
    _check_quantiles([q])
    diff = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    return q * np.maximum(diff, 0.0) + (1.0 - q) * np.maximum(-diff, 0.0)


def quantile_loss(y: np.ndarray, yhat: Tensor, quantiles: Sequence[float]) -> Tensor:
    """Pinball loss summed over quantiles, averaged over samples and horizons.

    ``y`` is ``[B, tau]`` (or ``[tau]``) and ``yhat`` is ``[B, tau, |Q|]``.
    """
    q = _check_quantiles(quantiles)
    y = np.asarray(y, dtype=float)
    if yhat.shape[:-1] != y.shape or yhat.shape[-1] != q.size:
        raise ConfigError(f"quantile_loss shapes: y {y.shape}, yhat {yhat.shape}, |Q|={q.size}")
    diff = T.sub(y[..., None], yhat)
    per = T.relu(diff) * q + T.relu(-diff) * (1.0 - q)
    return T.tsum(per) * (1.0 / y.size)


def q_risk(actuals, forecasts, q: float) -> float:
    """Normalised quantile risk: 2 * sum QL / sum |y| over all points."""
    actuals = np.asarray(actuals, dtype=float)
    denom = np.abs(actuals).sum()
    if denom == 0:
        raise DataError("q-risk is undefined when sum |y| = 0")
    return float(2.0 * pinball(actuals, forecasts, q).sum() / denom)


def quantile_crossings(forecasts: np.ndarray) -> int:
    """Count (sample, horizon) pairs whose quantile forecasts are not non-decreasing."""
    f = np.asarray(forecasts)
    return int((np.diff(f, axis=-1) < 0).any(axis=-1).sum())


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale every gradient by max_norm / g when the global L2 norm g exceeds max_norm."""
    if not max_norm > 0:
        raise ConfigError("max_grad_norm must be > 0")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_grad_norm: float = 1.0
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    samples_per_epoch: int | None = None
    max_val_samples: int | None = None
    # False keeps the last-epoch weights (overfitting checks)
    restore_best: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]


def _subsample(windows: Sequence[WindowedSample], cap: int | None) -> Sequence[WindowedSample]:
    if cap is None or len(windows) <= cap:
        return windows
    idx = np.linspace(0, len(windows) - 1, cap).round().astype(int)
    return [windows[i] for i in idx]


def predict(
    model: TFTModel,
    windows: Sequence[WindowedSample],
    batch_size: int = 256,
    keep_internals: bool = False,
) -> ForecastOutput:
    """Eval-mode forward over ``windows``; outputs concatenated on axis 0."""
    if not windows:
        raise DataError("no windows to predict")
    parts = []
    with T.no_grad():
        for i in range(0, len(windows), batch_size):
            parts.append(model(collate(windows[i : i + batch_size]), keep_internals=keep_internals))
    return concat_outputs(parts)


def concat_outputs(parts: Sequence[ForecastOutput]) -> ForecastOutput:
    def cat(name):
        arrs = [getattr(p, name) for p in parts]
        return None if arrs[0] is None else np.concatenate(arrs, axis=0)

    internals = None
    if parts[0].internals is not None:
        internals = {}
        for key, val in parts[0].internals.items():
            if isinstance(val, np.ndarray):
                internals[key] = np.concatenate([p.internals[key] for p in parts], axis=0)
            elif isinstance(val, tuple):
                internals[key] = tuple(
                    np.concatenate([p.internals[key][j] for p in parts], axis=0) for j in range(len(val))
                )
            else:
                internals[key] = val
    return ForecastOutput(
        yhat=Tensor(np.concatenate([p.yhat.data for p in parts], axis=0)),
        attention=cat("attention"),
        vsn_static=cat("vsn_static"),
        vsn_past=cat("vsn_past"),
        vsn_future=cat("vsn_future"),
        internals=internals,
    )


def evaluate_loss(model: TFTModel, windows: Sequence[WindowedSample], batch_size: int = 256) -> float:
    """Mean quantile loss (summed over quantiles) in eval mode."""
    out = predict(model, windows, batch_size)
    y = np.stack([w.target for w in windows])
    per = sum(pinball(y, out.forecasts[..., j], q) for j, q in enumerate(model.config.quantiles))
    return float(per.mean())


def fit(
    model: TFTModel,
    train: Sequence[WindowedSample],
    val: Sequence[WindowedSample],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    log_wall_time: bool = True,
) -> tuple[TFTModel, History]:
    """Minibatch Adam on the quantile loss with early stopping.

    The model is updated in place and left holding its best-validation
    weights unless ``cfg.restore_best`` is off.  Epoch ``e`` visits
    ``samples_per_epoch`` windows drawn without replacement from a
    permutation seeded by ``(seed, e)``.
    """
    if not train or not val:
        raise DataError("fit needs non-empty train and validation sets")
    if {(w.entity, w.start) for w in train} & {(w.entity, w.start) for w in val}:
        raise ContractError("train and validation windows overlap")
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate)
    val_set = _subsample(val, cfg.max_val_samples)
    quantiles = model.config.quantiles
    history = History()
    best_state = model.state_dict()
    bad_epochs = 0
    step = 0
    log = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, epoch])))
            order = gen.permutation(len(train))
            if cfg.samples_per_epoch is not None:
                order = order[: cfg.samples_per_epoch]
            total, seen = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                batch = collate([train[j] for j in order[i : i + cfg.batch_size]])
                opt.zero_grad()
                out = model(batch, RngState(cfg.seed, step), training=True)
                loss = quantile_loss(batch.target, out.yhat, quantiles)
                if not np.isfinite(loss.data).all():
                    raise NumericError(f"training loss (epoch {epoch}, step {step})")
                T.backward(loss)
                grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
                grads = clip_grad_norm(grads, cfg.max_grad_norm)
                opt.step(grads)
                total += loss.item() * len(batch)
                seen += len(batch)
                step += 1
            train_loss = total / max(seen, 1)
            val_loss = evaluate_loss(model, val_set)
            if not np.isfinite(val_loss):
                raise NumericError(f"validation loss (epoch {epoch})")
            rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
            history.epochs.append(rec)
            if log:
                row = asdict(rec)
                if not log_wall_time:
                    del row["wall_time"]
                log.write(json.dumps(row) + "\n")
                log.flush()
            logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
            if val_loss < history.best_val_loss:
                history.best_val_loss, history.best_epoch = val_loss, epoch
                best_state = model.state_dict()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    history.stopped_early = True
                    break
    finally:
        if log:
            log.close()
    if cfg.restore_best:
        model.load_state_dict(best_state)
    return model, history


# ---------------------------------------------------------------------------
# Random search
# ---------------------------------------------------------------------------


@dataclass
class SearchSpace:
    state_sizes: tuple[int, ...] = (10, 20, 40, 80, 160, 240, 320)
    dropout_rates: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 0.9)
    minibatch_sizes: tuple[int, ...] = (64, 128, 256)
    learning_rates: tuple[float, ...] = (0.0001, 0.001, 0.01)
    max_grad_norms: tuple[float, ...] = (0.01, 1.0, 100.0)
    num_heads: tuple[int, ...] = (1, 4)
    budget: int = 60

    def draw(self, gen: np.random.Generator) -> dict:
        d_model = int(gen.choice(self.state_sizes))
        heads = [h for h in self.num_heads if d_model % h == 0]
        if not heads:
            raise ConfigError(f"no head count in {self.num_heads} divides state size {d_model}")
        return {
            "d_model": d_model,
            "dropout": float(gen.choice(self.dropout_rates)),
            "batch_size": int(gen.choice(self.minibatch_sizes)),
            "learning_rate": float(gen.choice(self.learning_rates)),
            "max_grad_norm": float(gen.choice(self.max_grad_norms)),
            "num_heads": int(gen.choice(heads)),
        }


@dataclass
class Trial:
    index: int
    params: dict
    val_loss: float
    history: History


def random_search(
    space: SearchSpace,
    train: Sequence[WindowedSample],
    val: Sequence[WindowedSample],
    model_config: TFTConfig,
    train_config: TrainConfig,
    budget: int | None = None,
    seed: int = 0,
) -> list[Trial]:
    """Train ``budget`` uniformly drawn configurations; return them best first."""
    budget = space.budget if budget is None else budget
    if budget < 1:
        raise ConfigError("search budget must be >= 1")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EA4C4])))
    trials = []
    for i in range(budget):
        p = space.draw(gen)
        mcfg = replace(model_config, d_model=p["d_model"], num_heads=p["num_heads"], dropout=p["dropout"])
        tcfg = replace(
            train_config,
            batch_size=p["batch_size"],
            learning_rate=p["learning_rate"],
            max_grad_norm=p["max_grad_norm"],
            seed=seed + i,
        )
        model = TFTModel(mcfg, seed=seed + i)
        try:
            _, hist = fit(model, train, val, tcfg)
            loss = hist.best_val_loss
        except NumericError as exc:
            logger.warning("trial %d diverged: %s", i, exc)
            hist, loss = History(), float("inf")
        trials.append(Trial(i, p, loss, hist))
    return sorted(trials, key=lambda tr: (tr.val_loss, tr.index))
