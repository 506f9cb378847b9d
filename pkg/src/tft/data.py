"""Dataset schema, CSV ingestion, normalisation, windowing and synthetic data."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import Batch, VariableSpec

logger = logging.getLogger(__name__)

ROLES = ("static", "known", "observed", "target", "entity_id", "time_index")
PRESENCE_COLUMN = "present"


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    name: str
    role: str
    kind: str = "real"
    cardinality: int = 0
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind not in ("real", "categorical"):
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if self.categories is not None and self.cardinality == 0:
                object.__setattr__(self, "cardinality", len(self.categories))
            if self.cardinality < 1:
                raise ConfigError(f"categorical column {self.name!r} needs cardinality >= 1")

    def encode(self, raw: str) -> tuple[int, bool]:
        """Category code (1..cardinality) and whether the value was known.

        Without an explicit vocabulary the raw value must be an integer in
        ``[0, cardinality)``.  Anything else maps to the reserved code 0.
        """
        raw = raw.strip()
        if self.categories is not None:
            try:
                return self.categories.index(raw) + 1, True
            except ValueError:
                return 0, False
        try:
            v = int(float(raw))
        except ValueError:
            return 0, False
        if 0 <= v < self.cardinality and float(raw) == v:
            return v + 1, True
        return 0, False


@dataclass(frozen=True)
class DatasetSchema:
    columns: tuple[Column, ...]
    presence_flag: bool = False

    def __post_init__(self):
        for role in ("target", "entity_id", "time_index"):
            n = sum(c.role == role for c in self.columns)
            if n != 1:
                raise ConfigError(f"schema needs exactly one {role} column, found {n}")
        if self.target.kind != "real":
            raise ConfigError("target column must be real-valued")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate column names in schema")

    def _role(self, role: str) -> list[Column]:
        return [c for c in self.columns if c.role == role]

    @property
    def target(self) -> Column:
        return self._role("target")[0]

    @property
    def entity_id(self) -> Column:
        return self._role("entity_id")[0]

    @property
    def time_index(self) -> Column:
        return self._role("time_index")[0]

    @property
    def static(self) -> list[Column]:
        return self._role("static")

    @property
    def known(self) -> list[Column]:
        return self._role("known")

    @property
    def observed(self) -> list[Column]:
        return self._role("observed")

    # Model-facing variable layout.  Past = target, observed, [presence], known.
    def _spec(self, c: Column) -> VariableSpec:
        return VariableSpec(c.name, c.kind, c.cardinality)

    def static_specs(self) -> tuple[VariableSpec, ...]:
        return tuple(self._spec(c) for c in self.static)

    def past_specs(self) -> tuple[VariableSpec, ...]:
        specs = [self._spec(self.target)] + [self._spec(c) for c in self.observed]
        if self.presence_flag:
            specs.append(VariableSpec(PRESENCE_COLUMN, "real"))
        return tuple(specs + [self._spec(c) for c in self.known])

    def future_specs(self) -> tuple[VariableSpec, ...]:
        return tuple(self._spec(c) for c in self.known)

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            d = asdict(c)
            if d["categories"] is None:
                del d["categories"]
            else:
                d["categories"] = list(d["categories"])
            cols.append(d)
        return {"columns": cols, "presence_flag": self.presence_flag}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        try:
            cols = []
            for c in d["columns"]:
                c = dict(c)
                if c.get("categories") is not None:
                    c["categories"] = tuple(str(x) for x in c["categories"])
                cols.append(Column(**c))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from exc
        return cls(tuple(cols), bool(d.get("presence_flag", False)))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        return cls.from_dict(read_json(path))


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# Series
# ---------------------------------------------------------------------------


@dataclass
class EntitySeries:
    entity: str
    static: np.ndarray  # [m_static]; categorical codes as floats
    times: np.ndarray  # int [L], strictly increasing by 1
    target: np.ndarray  # [L]
    observed: np.ndarray  # [L, n_observed]
    known: np.ndarray  # [L, n_known]
    present: np.ndarray = None  # bool [L]

    def __post_init__(self):
        if self.present is None:
            self.present = np.ones(len(self.times), dtype=bool)

    def __len__(self) -> int:
        return len(self.times)

    def past_matrix(self, presence_flag: bool = False) -> np.ndarray:
        cols = [self.target[:, None], self.observed]
        if presence_flag:
            cols.append(self.present[:, None].astype(float))
        cols.append(self.known)
        return np.concatenate(cols, axis=1)


def load_csv(path: str | Path, schema: DatasetSchema) -> list[EntitySeries]:
    """Read a long-format CSV into per-entity, time-sorted, gap-free series.

    Missing time steps are filled with the previous row's values and flagged
    ``present = False``.  Static values come from each entity's first row.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c.name for c in schema.columns if c.name not in header]
        if missing:
            raise DataError(f"{path}: header lacks schema columns {missing}")
        rows: dict[str, list] = defaultdict(list)
        unknown: dict[str, int] = defaultdict(int)
        for lineno, rec in enumerate(reader, start=2):
            ent = rec[schema.entity_id.name]
            try:
                t = int(rec[schema.time_index.name])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad time index {rec[schema.time_index.name]!r}") from None

            def value(col: Column) -> float:
                raw = rec[col.name]
                if col.kind == "categorical":
                    code, ok = col.encode(raw)
                    if not ok:
                        unknown[col.name] += 1
                    return float(code)
                try:
                    v = float(raw)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col.name!r}: cannot parse {raw!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {col.name!r}: non-finite value {raw!r}")
                return v

            rows[ent].append(
                (
                    t,
                    value(schema.target),
                    [value(c) for c in schema.observed],
                    [value(c) for c in schema.known],
                    [value(c) for c in schema.static],
                )
            )
    for col, n in unknown.items():
        logger.warning("column %r: %d unknown categorical values mapped to code 0", col, n)

    out = []
    for ent in sorted(rows):
        recs = sorted(rows[ent], key=lambda r: r[0])
        times = np.array([r[0] for r in recs])
        if np.any(np.diff(times) == 0):
            raise DataError(f"entity {ent!r}: duplicate time index")
        full = np.arange(times[0], times[-1] + 1)
        # position of the latest observed row at or before each full step
        src = np.searchsorted(times, full, side="right") - 1
        present = np.isin(full, times)
        target = np.array([r[1] for r in recs])[src]
        observed = np.array([r[2] for r in recs]).reshape(len(recs), -1)[src]
        known = np.array([r[3] for r in recs]).reshape(len(recs), -1)[src]
        static = np.array(recs[0][4], dtype=float)
        out.append(EntitySeries(ent, static, full, target, observed, known, present))
    return out


def write_csv(series: Sequence[EntitySeries], schema: DatasetSchema, path: str | Path) -> None:
    """Inverse of :func:`load_csv` for gap-free series; categoricals as raw values."""

    def raw(col: Column, v: float) -> str:
        if col.kind == "categorical":
            code = int(round(v))
            if col.categories is not None:
                return col.categories[code - 1] if code > 0 else "?"
            return str(code - 1)
        return repr(float(v))

    names = [c.name for c in schema.columns]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for s in series:
            for i in range(len(s)):
                vals = {schema.entity_id.name: s.entity, schema.time_index.name: str(int(s.times[i]))}
                vals[schema.target.name] = raw(schema.target, s.target[i])
                for j, c in enumerate(schema.observed):
                    vals[c.name] = raw(c, s.observed[i, j])
                for j, c in enumerate(schema.known):
                    vals[c.name] = raw(c, s.known[i, j])
                for j, c in enumerate(schema.static):
                    vals[c.name] = raw(c, s.static[j])
                w.writerow([vals[n] for n in names])


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    """Per-entity z-scoring of real time-varying columns.

    Static reals are constant within an entity, so they are scaled with
    dataset-level statistics instead.  Entities unseen at fit time fall back
    to dataset-level statistics for everything.
    """

    schema: DatasetSchema
    entity_stats: dict[str, dict[str, tuple[float, float]]]
    fallback: dict[str, tuple[float, float]]

    def _stats(self, entity: str) -> dict[str, tuple[float, float]]:
        stats = self.entity_stats.get(entity)
        if stats is None:
            logger.warning("entity %r absent from the training range; using dataset statistics", entity)
            return self.fallback
        return stats

    def _transform(self, s: EntitySeries, forward: bool) -> EntitySeries:
        stats = self._stats(s.entity)
        sch = self.schema

        def f(col: Column, x: np.ndarray, table) -> np.ndarray:
            if col.kind != "real":
                return x
            mu, sd = table[col.name]
            return (x - mu) / sd if forward else x * sd + mu

        observed = s.observed.copy()
        for j, c in enumerate(sch.observed):
            observed[:, j] = f(c, s.observed[:, j], stats)
        known = s.known.copy()
        for j, c in enumerate(sch.known):
            known[:, j] = f(c, s.known[:, j], stats)
        static = s.static.copy()
        for j, c in enumerate(sch.static):
            static[j] = f(c, s.static[j], self.fallback)
        target = f(sch.target, s.target, stats)
        return EntitySeries(s.entity, static, s.times.copy(), target, observed, known, s.present.copy())

    def apply(self, series: Iterable[EntitySeries]) -> list[EntitySeries]:
        return [self._transform(s, True) for s in series]

    def invert(self, series: Iterable[EntitySeries]) -> list[EntitySeries]:
        return [self._transform(s, False) for s in series]

    def target_stats(self, entity: str) -> tuple[float, float]:
        return self._stats(entity)[self.schema.target.name]

    def invert_target(self, values: np.ndarray, entity: str) -> np.ndarray:
        mu, sd = self.target_stats(entity)
        return np.asarray(values) * sd + mu

    def normalize_target(self, values: np.ndarray, entity: str) -> np.ndarray:
        mu, sd = self.target_stats(entity)
        return (np.asarray(values) - mu) / sd

    def to_dict(self) -> dict:
        return {
            "entity_stats": {e: {c: list(v) for c, v in st.items()} for e, st in self.entity_stats.items()},
            "fallback": {c: list(v) for c, v in self.fallback.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, schema: DatasetSchema) -> "Normalizer":
        ent = {e: {c: tuple(v) for c, v in st.items()} for e, st in d["entity_stats"].items()}
        return cls(schema, ent, {c: tuple(v) for c, v in d["fallback"].items()})


def _mean_std(x: np.ndarray, label: str) -> tuple[float, float]:
    mu = float(x.mean())
    sd = float(x.std())
    if not sd > 0:
        logger.warning("%s has zero variance in the training range; using std=1", label)
        sd = 1.0
    return mu, sd


def fit_normalize(
    series: Sequence[EntitySeries],
    schema: DatasetSchema,
    train_cutoff: int | dict[str, int],
) -> Normalizer:
    """Fit statistics on rows with ``time < train_cutoff`` (per entity if a dict)."""
    ts_cols = [(schema.target, lambda s: s.target)]
    ts_cols += [(c, (lambda j: lambda s: s.observed[:, j])(j)) for j, c in enumerate(schema.observed)]
    ts_cols += [(c, (lambda j: lambda s: s.known[:, j])(j)) for j, c in enumerate(schema.known)]
    ts_cols = [(c, get) for c, get in ts_cols if c.kind == "real"]

    entity_stats: dict[str, dict[str, tuple[float, float]]] = {}
    pooled: dict[str, list[np.ndarray]] = defaultdict(list)
    for s in series:
        cut = train_cutoff[s.entity] if isinstance(train_cutoff, dict) else train_cutoff
        sel = s.times < cut
        if not sel.any():
            continue
        stats = {}
        for col, get in ts_cols:
            vals = get(s)[sel]
            stats[col.name] = _mean_std(vals, f"{s.entity}/{col.name}")
            pooled[col.name].append(vals)
        entity_stats[s.entity] = stats
    if not entity_stats:
        raise DataError("no rows fall inside the training range")
    fallback = {name: _mean_std(np.concatenate(v), f"dataset/{name}") for name, v in pooled.items()}
    trained = [s for s in series if s.entity in entity_stats]
    for j, c in enumerate(schema.static):
        if c.kind == "real":
            fallback[c.name] = _mean_std(np.array([s.static[j] for s in trained]), f"static/{c.name}")
    return Normalizer(schema, entity_stats, fallback)


# ---------------------------------------------------------------------------
# Windowing and splits
# ---------------------------------------------------------------------------


@dataclass
class WindowedSample:
    entity: str
    start: int  # forecast time t
    static: np.ndarray  # [m_static]
    past: np.ndarray  # [k+1, m_past], times t-k..t
    future: np.ndarray  # [tau_max, m_future], known inputs at t+1..t+tau_max
    target: np.ndarray  # [tau_max]
    past_times: np.ndarray
    target_times: np.ndarray


def window_count(length: int, k: int, tau_max: int, stride: int = 1) -> int:
    span = k + 1 + tau_max
    return 0 if length < span else (length - span) // stride + 1


def make_windows(
    series: Sequence[EntitySeries],
    k: int,
    tau_max: int,
    stride: int = 1,
    presence_flag: bool = False,
) -> list[WindowedSample]:
    """All windows with forecast start ``t = times[k], times[k+stride], ...``.

    Window arrays are views into per-entity matrices, so memory stays
    proportional to the series, not to the window count.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    out = []
    for s in series:
        n = window_count(len(s), k, tau_max, stride)
        if n == 0:
            continue
        past_m = s.past_matrix(presence_flag)
        for w in range(n):
            i = k + w * stride  # index of forecast start
            out.append(
                WindowedSample(
                    entity=s.entity,
                    start=int(s.times[i]),
                    static=s.static,
                    past=past_m[i - k : i + 1],
                    future=s.known[i + 1 : i + 1 + tau_max],
                    target=s.target[i + 1 : i + 1 + tau_max],
                    past_times=s.times[i - k : i + 1],
                    target_times=s.times[i + 1 : i + 1 + tau_max],
                )
            )
    return out


def leakage_violations(windows: Iterable[WindowedSample]) -> int:
    """Windows whose past extends beyond t or whose targets start at or before t."""
    bad = 0
    for w in windows:
        if w.past_times.max() > w.start or w.target_times.min() <= w.start:
            bad += 1
    return bad


@dataclass
class Split:
    train: list[WindowedSample]
    val: list[WindowedSample]
    test: list[WindowedSample]
    # entity -> (first validation time, first test time)
    boundaries: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def train_cutoff(self) -> dict[str, int]:
        return {e: b[0] for e, b in self.boundaries.items()}


def split_boundaries(
    series: Sequence[EntitySeries],
    train_frac: float = 0.9,
    val_frac: float = 0.1,
    boundaries: tuple[int, int] | None = None,
) -> dict[str, tuple[int, int]]:
    if boundaries is not None:
        b1, b2 = boundaries
        if b2 < b1:
            raise ConfigError("test boundary precedes validation boundary")
        return {s.entity: (int(b1), int(b2)) for s in series}
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac > 1 + 1e-12:
        raise ConfigError(f"split fractions must be >= 0 and sum to <= 1 (got {train_frac}, {val_frac})")
    out = {}
    for s in series:
        n = len(s)
        n_train = int(math.floor(train_frac * n + 1e-9))
        n_val = int(math.floor((train_frac + val_frac) * n + 1e-9)) - n_train
        t0 = int(s.times[0])
        out[s.entity] = (t0 + n_train, t0 + n_train + n_val)
    return out


def chrono_split(
    series: Sequence[EntitySeries],
    k: int,
    tau_max: int,
    train_frac: float = 0.9,
    val_frac: float = 0.1,
    stride: int = 1,
    boundaries: tuple[int, int] | None = None,
    presence_flag: bool = False,
) -> Split:
    """Chronological train/validation/test windows per entity.

    A window belongs to the partition containing its last target time, so a
    window straddling a boundary goes to the later partition.  The test
    partition may be empty (train/validation only, as when the test period
    lies outside the file); an empty train or validation partition is an
    error.
    """
    bounds = split_boundaries(series, train_frac, val_frac, boundaries)
    parts: tuple[list, list, list] = ([], [], [])
    for w in make_windows(series, k, tau_max, stride, presence_flag):
        b1, b2 = bounds[w.entity]
        last = int(w.target_times[-1])
        parts[0 if last < b1 else 1 if last < b2 else 2].append(w)
    if not parts[0]:
        raise ConfigError("training partition is empty")
    if not parts[1]:
        raise ConfigError("validation partition is empty")
    return Split(parts[0], parts[1], parts[2], bounds)


def collate(windows: Sequence[WindowedSample]) -> Batch:
    return Batch(
        static=np.stack([w.static for w in windows]),
        past=np.stack([w.past for w in windows]),
        future=np.stack([w.future for w in windows]),
        target=np.stack([w.target for w in windows]),
    )


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("seasonal", "regime_switch", "noise_features")


@dataclass
class SynthParams:
    n_entities: int = 20
    length: int = 500
    period: int = 24
    amplitude: float = 1.0
    noise: float = 0.1
    random_phase: bool = True
    # harmonics > 1: random per-entity waveform sum_h a_h sin(h w t + phi_h), rescaled to the sine's RMS
    harmonics: int = 1
    # observed inputs: one informative (phase quadrature) plus pure noise
    informative_feature: bool = True
    n_noise_features: int = 2
    # regime_switch: steps [switch_start, switch_end) follow different dynamics
    switch_start: int = 250
    switch_end: int = 350
    regime_noise: float = 1.0
    regime_ar: float = 0.9

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthParams":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synthetic parameters: {sorted(extra)}")
        return cls(**d)


def synth_schema(kind: str, params: SynthParams | dict | None = None) -> DatasetSchema:
    p = params if isinstance(params, SynthParams) else SynthParams.from_dict(params)
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if kind == "noise_features":
        p = SynthParams(**{**asdict(p), "informative_feature": False})
    cols = [
        Column("id", "entity_id"),
        Column("t", "time_index"),
        Column("y", "target"),
        Column("series", "static", "categorical", cardinality=max(1, p.n_entities)),
        Column("phase", "known", "categorical", cardinality=p.period),
    ]
    if p.informative_feature:
        cols.append(Column("signal", "observed"))
    cols += [Column(f"noise{j + 1}", "observed") for j in range(p.n_noise_features)]
    return DatasetSchema(tuple(cols))


def synth_generate(kind: str, params: SynthParams | dict | None = None, seed: int = 0) -> list[EntitySeries]:
    """Reproducible synthetic panels.

    ``seasonal``: ``y_t = A sin(2 pi t / P + phi_i) + eps``; with
    ``harmonics > 1`` the sine becomes a random unit-norm mix of harmonics.
    ``regime_switch``: the same, except steps ``[switch_start, switch_end)``
    follow a high-variance AR(1) process with no seasonality.
    ``noise_features``: seasonal target whose only observed inputs are noise.
    Known input: ``t mod P``; informative observed input: the quadrature
    companion (each sine replaced by a cosine) plus noise.
    """
    p = params if isinstance(params, SynthParams) else SynthParams.from_dict(params)
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if kind == "noise_features":
        p = SynthParams(**{**asdict(p), "informative_feature": False})
    rng = np.random.default_rng(seed)
    t = np.arange(p.length)
    out = []
    if p.harmonics < 1:
        raise ConfigError("harmonics must be >= 1")
    h = np.arange(1, p.harmonics + 1)
    for i in range(p.n_entities):
        phi = rng.uniform(0, 2 * np.pi, p.harmonics) if p.random_phase else np.zeros(p.harmonics)
        coef = np.ones(1) if p.harmonics == 1 else rng.standard_normal(p.harmonics)
        coef = coef / np.sqrt((coef**2).sum())
        angle = 2 * np.pi * np.outer(t, h) / p.period + phi
        y = p.amplitude * np.sin(angle) @ coef + p.noise * rng.standard_normal(p.length)
        if kind == "regime_switch":
            lo, hi = max(0, p.switch_start), min(p.length, p.switch_end)
            x = y[lo - 1] if lo > 0 else 0.0
            shocks = p.regime_noise * rng.standard_normal(hi - lo)
            for j in range(lo, hi):
                x = p.regime_ar * x + shocks[j - lo]
                y[j] = x
        obs = []
        if p.informative_feature:
            obs.append(np.cos(angle) @ coef + p.noise * rng.standard_normal(p.length))
        obs += [rng.standard_normal(p.length) for _ in range(p.n_noise_features)]
        observed = np.stack(obs, axis=1) if obs else np.zeros((p.length, 0))
        known = (t % p.period + 1).astype(float)[:, None]
        out.append(
            EntitySeries(
                entity=f"e{i:04d}",
                static=np.array([float(i + 1)]),
                times=t.copy(),
                target=y,
                observed=observed,
                known=known,
            )
        )
    return out
