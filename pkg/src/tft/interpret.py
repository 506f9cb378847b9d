"""Interpretability analyses over forecast outputs.

Variable importance from selection weights, persistent temporal patterns
from one-step attention, and regime detection via the Bhattacharyya
distance between instantaneous and average attention patterns.

Position indices follow the decoder layout: ``n = -k .. tau_max`` with
``n = 0`` the forecast time ``t``; the lag of a past position is ``-n``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import WindowedSample
from .errors import ContractError
from .model import Batch, ForecastOutput, TFTConfig, TFTModel

PERCENTILES = (10, 50, 90)


# ---------------------------------------------------------------------------
# Variable importance
# ---------------------------------------------------------------------------


@dataclass
class VariableImportance:
    group: str
    name: str
    p10: float
    p50: float
    p90: float


@dataclass
class ImportanceReport:
    rows: list[VariableImportance]

    def group(self, name: str) -> list[VariableImportance]:
        return [r for r in self.rows if r.group == name]

    def get(self, group: str, name: str) -> VariableImportance:
        for r in self.rows:
            if r.group == group and r.name == name:
                return r
        raise KeyError((group, name))


def percentiles(samples: np.ndarray) -> np.ndarray:
    """Column-wise 10/50/90th percentiles, linear interpolation; shape [3, m]."""
    return np.percentile(samples, PERCENTILES, axis=0, method="linear")


def _group_names(config: TFTConfig) -> dict[str, list[str]]:
    static = [v.name for v in config.static_vars]
    extra = static if config.ablations.no_static_encoders else []
    return {
        "static": static,
        "past": [v.name for v in config.past_vars] + extra,
        "future": [v.name for v in config.future_vars] + extra,
    }


def aggregate_importance(outputs: Iterable[ForecastOutput], config: TFTConfig) -> ImportanceReport:
    pooled: dict[str, list[np.ndarray]] = {"static": [], "past": [], "future": []}
    seen = False
    for out in outputs:
        seen = True
        for group, w in (("static", out.vsn_static), ("past", out.vsn_past), ("future", out.vsn_future)):
            if w is not None:
                pooled[group].append(w.reshape(-1, w.shape[-1]))
    if not seen:
        raise ContractError("aggregate_importance needs at least one output")
    names = _group_names(config)
    rows = []
    for group in ("static", "past", "future"):
        if not pooled[group]:
            continue
        pct = percentiles(np.concatenate(pooled[group], axis=0))
        for j, name in enumerate(names[group]):
            rows.append(VariableImportance(group, name, *map(float, pct[:, j])))
    return ImportanceReport(rows)


# ---------------------------------------------------------------------------
# Attention structure
# ---------------------------------------------------------------------------


def attention_decomposition_check(model: TFTModel, sample: Batch) -> float:
    """Max |A~ (theta W_V) - heads| for a frozen model on ``sample``.

    The heads output is what the attention layer feeds into ``W_H``; the
    recomputation uses only the returned head-averaged weights, the enriched
    features and the shared value projection.
    """
    with T.no_grad():
        out = model(sample, keep_internals=True)
    theta = out.internals["theta"]
    values = theta @ model.attention.w_v.data
    beta = out.attention @ values
    return float(np.abs(beta - out.internals["heads"]).max())


@dataclass
class TemporalPattern:
    positions: np.ndarray  # n = -k .. 1, the one-step support
    mean: np.ndarray
    p10: np.ndarray
    p50: np.ndarray
    p90: np.ndarray
    horizons: tuple[int, ...]
    horizon_positions: np.ndarray  # n = -k .. tau_max
    horizon_means: np.ndarray  # [len(horizons), k + 1 + tau_max]

    @property
    def lags(self) -> np.ndarray:
        """Steps before the forecast time; -1 is the one-step target position itself."""
        return -self.positions

    def weight_at_lag(self, lag: int) -> float:
        return float(self.mean[self.positions == -lag][0])

    def lag_ratio(self, lag: int) -> float:
        """Mean weight at ``lag`` over the median mean weight at the other past lags."""
        past = self.positions <= 0
        others = self.mean[past & (self.positions != -lag)]
        return self.weight_at_lag(lag) / float(np.median(others))


def temporal_patterns(
    attention: np.ndarray, k: int, horizons: Sequence[int] | None = None
) -> TemporalPattern:
    """Summaries of attention rows stacked as ``[S, N, N]`` over S forecasts."""
    attention = np.asarray(attention)
    if attention.ndim != 3 or attention.shape[0] == 0:
        raise ContractError("temporal_patterns needs a non-empty [S, N, N] stack")
    n_pos = attention.shape[1]
    tau_max = n_pos - k - 1
    one_step = attention[:, k + 1, : k + 2]
    pct = percentiles(one_step)
    horizons = tuple(range(1, tau_max + 1)) if horizons is None else tuple(horizons)
    for h in horizons:
        if not 1 <= h <= tau_max:
            raise ContractError(f"horizon {h} outside 1..{tau_max}")
    return TemporalPattern(
        positions=np.arange(-k, 2),
        mean=one_step.mean(axis=0),
        p10=pct[0],
        p50=pct[1],
        p90=pct[2],
        horizons=horizons,
        horizon_positions=np.arange(-k, tau_max + 1),
        horizon_means=np.stack([attention[:, k + h, :].mean(axis=0) for h in horizons]),
    )


def mean_patterns(attention: np.ndarray) -> np.ndarray:
    """Average attention rows over forecast times: ``[T, N, N] -> [N, N]``."""
    attention = np.asarray(attention)
    if attention.shape[0] < 1:
        raise ContractError("mean_patterns needs at least one forecast time")
    return attention.mean(axis=0)


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------


def bhattacharyya_distance(p, q) -> float:
    """kappa = sqrt(1 - sum sqrt(p q)) after renormalising both inputs."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ContractError("distributions must be nonnegative")
    sp, sq = p.sum(), q.sum()
    if sp <= 0 or sq <= 0:
        raise ContractError("distributions must have positive mass")
    # dividing once by sqrt(sp sq) makes rho(p, p) exactly 1
    rho = np.sqrt(p * q).sum() / np.sqrt(sp * sq)
    return float(np.sqrt(max(1.0 - rho, 0.0)))


def _row_kappa(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorised kappa over the leading axes."""
    rho = np.sqrt(p * q).sum(axis=-1) / np.sqrt(p.sum(axis=-1) * q.sum(axis=-1))
    return np.sqrt(np.maximum(1.0 - rho, 0.0))


def _support_rows(attention: np.ndarray, k: int) -> list[np.ndarray]:
    """Horizon rows restricted to their causal support and renormalised."""
    n_pos = attention.shape[-1]
    rows = []
    for h in range(1, n_pos - k):
        r = attention[..., k + h, : k + h + 1]
        rows.append(r / r.sum(axis=-1, keepdims=True))
    return rows


def flag_intervals(times: np.ndarray, dist: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximal runs of consecutive above-threshold points as (first, last) times."""
    out = []
    start = prev = None
    for t, d in zip(times, dist):
        if d > threshold:
            if start is None:
                start = t
            prev = t
        elif start is not None:
            out.append((int(start), int(prev)))
            start = None
    if start is not None:
        out.append((int(start), int(prev)))
    return out


@dataclass
class EntityRegimes:
    entity: str
    times: np.ndarray  # forecast times t
    dist: np.ndarray
    mean_pattern: np.ndarray  # [N, N]
    intervals: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class RegimeSeries:
    threshold: float
    entities: list[EntityRegimes]

    def get(self, entity: str) -> EntityRegimes:
        for e in self.entities:
            if e.entity == entity:
                return e
        raise KeyError(entity)


def regime_distance(
    per_entity: Mapping[str, tuple[np.ndarray, np.ndarray]],
    k: int,
    threshold: float = 0.3,
) -> RegimeSeries:
    """dist(t) per entity from ``{entity: (times [T], attention [T, N, N])}``.

    dist(t) is the mean over horizons of kappa between the attention row at
    ``t`` and the entity's average row, each on its causal support.
    """
    result = []
    for entity in sorted(per_entity):
        times, att = per_entity[entity]
        order = np.argsort(times, kind="stable")
        times, att = np.asarray(times)[order], np.asarray(att)[order]
        avg = mean_patterns(att)
        inst = _support_rows(att, k)
        ref = _support_rows(avg, k)
        dist = np.mean([_row_kappa(i, r[None, :]) for i, r in zip(inst, ref)], axis=0)
        result.append(EntityRegimes(entity, times, dist, avg, flag_intervals(times, dist, threshold)))
    return RegimeSeries(threshold, result)


def group_by_entity(
    windows: Sequence[WindowedSample], attention: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    if len(windows) != attention.shape[0]:
        raise ContractError("one attention matrix per window expected")
    idx: dict[str, list[int]] = {}
    for i, w in enumerate(windows):
        idx.setdefault(w.entity, []).append(i)
    return {
        e: (np.array([windows[i].start for i in ix]), attention[np.array(ix)])
        for e, ix in idx.items()
    }


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_importance(report: ImportanceReport, path: str | Path) -> None:
    _write_rows(
        path,
        ("group", "variable", "p10", "p50", "p90"),
        ((r.group, r.name, r.p10, r.p50, r.p90) for r in report.rows),
    )


def write_patterns(pattern: TemporalPattern, directory: str | Path) -> list[Path]:
    """One-step percentile table, a (lag, weight) series and one curve per horizon."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    table = d / "patterns_one_step.tsv"
    _write_rows(
        table,
        ("position", "lag", "mean", "p10", "p50", "p90"),
        zip(*(a.tolist() for a in (pattern.positions, pattern.lags, pattern.mean, pattern.p10, pattern.p50, pattern.p90))),
    )
    series = d / "patterns_lag_weight.tsv"
    _write_rows(series, ("lag", "weight"), zip(pattern.lags.tolist(), pattern.mean.tolist()))
    paths = [table, series]
    for h, curve in zip(pattern.horizons, pattern.horizon_means):
        p = d / f"patterns_horizon{h}.tsv"
        _write_rows(p, ("position", "weight"), zip(pattern.horizon_positions.tolist(), curve.tolist()))
        paths.append(p)
    return paths


def write_regimes(regimes: RegimeSeries, directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dist_path, iv_path = d / "regimes_dist.tsv", d / "regimes_intervals.tsv"
    _write_rows(
        dist_path,
        ("entity", "time", "dist"),
        ((e.entity, int(t), float(v)) for e in regimes.entities for t, v in zip(e.times, e.dist)),
    )
    _write_rows(
        iv_path,
        ("entity", "start", "end"),
        ((e.entity, a, b) for e in regimes.entities for a, b in e.intervals),
    )
    return [dist_path, iv_path]
