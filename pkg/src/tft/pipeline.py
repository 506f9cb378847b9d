"""Run configuration, data preparation, scoring and the ablation study."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    DatasetSchema,
    EntitySeries,
    Normalizer,
    WindowedSample,
    chrono_split,
    fit_normalize,
    make_windows,
    read_json,
    split_boundaries,
)
from .errors import ConfigError, DataError
from .model import ABLATION_FLAGS, Ablations, TFTConfig, TFTModel
from .training import TrainConfig, fit, predict, q_risk

PARTITIONS = ("train", "val", "test", "all")


def _from_fields(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class DatasetDetails:
    k: int
    tau_max: int
    train_frac: float = 0.9
    val_frac: float = 0.1
    stride: int = 1
    boundaries: tuple[int, int] | None = None

    def __post_init__(self):
        if self.boundaries is not None:
            self.boundaries = tuple(int(b) for b in self.boundaries)


@dataclass
class NetworkParameters:
    d_model: int = 16
    num_heads: int = 1
    dropout: float = 0.1
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    ablations: tuple[str, ...] = ()

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        self.ablations = tuple(self.ablations)
        Ablations.from_names(self.ablations)


@dataclass
class RunConfig:
    """Three sections: dataset details, network parameters, training parameters."""

    dataset_details: DatasetDetails
    network_parameters: NetworkParameters = field(default_factory=NetworkParameters)
    training_parameters: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        extra = set(d) - {"dataset_details", "network_parameters", "training_parameters"}
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        if "dataset_details" not in d:
            raise ConfigError("config lacks the dataset_details section")
        return cls(
            _from_fields(DatasetDetails, d["dataset_details"], "dataset_details"),
            _from_fields(NetworkParameters, d.get("network_parameters", {}), "network_parameters"),
            _from_fields(TrainConfig, d.get("training_parameters", {}), "training_parameters"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(read_json(path))

    def to_dict(self) -> dict:
        d = {
            "dataset_details": asdict(self.dataset_details),
            "network_parameters": asdict(self.network_parameters),
            "training_parameters": asdict(self.training_parameters),
        }
        d["network_parameters"]["quantiles"] = list(self.network_parameters.quantiles)
        d["network_parameters"]["ablations"] = list(self.network_parameters.ablations)
        if self.dataset_details.boundaries is not None:
            d["dataset_details"]["boundaries"] = list(self.dataset_details.boundaries)
        return d

    def model_config(self, schema: DatasetSchema, ablations: Sequence[str] | None = None) -> TFTConfig:
        net, ds = self.network_parameters, self.dataset_details
        return TFTConfig(
            k=ds.k,
            tau_max=ds.tau_max,
            d_model=net.d_model,
            num_heads=net.num_heads,
            dropout=net.dropout,
            quantiles=net.quantiles,
            static_vars=schema.static_specs(),
            past_vars=schema.past_specs(),
            future_vars=schema.future_specs(),
            ablations=Ablations.from_names(net.ablations if ablations is None else ablations),
        )


@dataclass
class PreparedData:
    schema: DatasetSchema
    details: DatasetDetails
    normalizer: Normalizer
    raw: list[EntitySeries]
    series: list[EntitySeries]  # normalised

    def windows(self, partition: str = "all", normalized: bool = True) -> list[WindowedSample]:
        return select_windows(self.series if normalized else self.raw, self.schema, self.details, partition)


def select_windows(
    series: Sequence[EntitySeries], schema: DatasetSchema, details: DatasetDetails, partition: str
) -> list[WindowedSample]:
    """Windows of one chronological partition (by last target time), or all of them."""
    if partition not in PARTITIONS:
        raise ConfigError(f"unknown partition {partition!r}; expected one of {PARTITIONS}")
    wins = make_windows(series, details.k, details.tau_max, details.stride, schema.presence_flag)
    if partition == "all":
        return wins
    bounds = split_boundaries(series, details.train_frac, details.val_frac, details.boundaries)
    idx = PARTITIONS.index(partition)

    def part(w: WindowedSample) -> int:
        b1, b2 = bounds[w.entity]
        last = int(w.target_times[-1])
        return 0 if last < b1 else 1 if last < b2 else 2

    return [w for w in wins if part(w) == idx]


def prepare_data(
    raw: list[EntitySeries],
    schema: DatasetSchema,
    details: DatasetDetails,
    normalizer: Normalizer | None = None,
) -> PreparedData:
    """Normalise ``raw``; a new normaliser is fitted on the training range unless given."""
    if not raw:
        raise DataError("dataset has no rows")
    if normalizer is None:
        cut = split_boundaries(raw, details.train_frac, details.val_frac, details.boundaries)
        normalizer = fit_normalize(raw, schema, {e: b[0] for e, b in cut.items()})
    return PreparedData(schema, details, normalizer, raw, normalizer.apply(raw))


def train_split(prepared: PreparedData):
    d = prepared.details
    return chrono_split(
        prepared.series, d.k, d.tau_max, d.train_frac, d.val_frac, d.stride, d.boundaries, prepared.schema.presence_flag
    )


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass
class Forecasts:
    entities: list[str]
    starts: np.ndarray  # [S]
    values: np.ndarray  # [S, tau_max, |Q|]
    quantiles: tuple[float, ...]
    normalized: bool

    def rows(self):
        for i, (e, t) in enumerate(zip(self.entities, self.starts)):
            for h in range(self.values.shape[1]):
                yield e, int(t), h + 1, self.values[i, h]


def forecast(
    model: TFTModel, prepared: PreparedData, windows: Sequence[WindowedSample], normalized: bool = False
) -> Forecasts:
    yhat = predict(model, windows).forecasts.copy()
    if not normalized:
        for i, w in enumerate(windows):
            yhat[i] = prepared.normalizer.invert_target(yhat[i], w.entity)
    return Forecasts(
        [w.entity for w in windows], np.array([w.start for w in windows]), yhat, model.config.quantiles, normalized
    )


def write_forecasts(fc: Forecasts, path: str | Path) -> None:
    header = ["entity", "forecast_start", "horizon"] + [f"q{q:g}" for q in fc.quantiles]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for e, t, h, vals in fc.rows():
            fh.write(",".join([e, str(t), str(h)] + [repr(float(v)) for v in vals]) + "\n")


def read_forecasts(path: str | Path, normalized: bool = False) -> Forecasts:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty forecast file")
    header = lines[0].split(",")
    if header[:3] != ["entity", "forecast_start", "horizon"] or len(header) < 4:
        raise DataError(f"{path}: unexpected header {header}")
    try:
        quantiles = tuple(float(h[1:]) for h in header[3:])
    except ValueError as exc:
        raise DataError(f"{path}: bad quantile column: {exc}") from exc
    groups: dict[tuple[str, int], dict[int, list[float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        try:
            key = (parts[0], int(parts[1]))
            groups.setdefault(key, {})[int(parts[2])] = [float(v) for v in parts[3:]]
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    keys = list(groups)
    tau = max(len(v) for v in groups.values())
    values = np.empty((len(keys), tau, len(quantiles)))
    for i, key in enumerate(keys):
        hs = groups[key]
        if sorted(hs) != list(range(1, tau + 1)):
            raise DataError(f"{path}: {key} lacks horizons 1..{tau}")
        values[i] = [hs[h] for h in range(1, tau + 1)]
    return Forecasts([k[0] for k in keys], np.array([k[1] for k in keys]), values, quantiles, normalized)


def actuals_for(fc: Forecasts, series: Sequence[EntitySeries]) -> np.ndarray:
    """Targets at ``start + horizon`` for every forecast row, from ``series``."""
    lookup = {s.entity: dict(zip(s.times.tolist(), s.target.tolist())) for s in series}
    tau = fc.values.shape[1]
    out = np.empty((len(fc.entities), tau))
    for i, (e, t) in enumerate(zip(fc.entities, fc.starts)):
        table = lookup.get(e)
        if table is None:
            raise DataError(f"entity {e!r} not in the data")
        for h in range(tau):
            if int(t) + h + 1 not in table:
                raise DataError(f"no actual for entity {e!r} at time {int(t) + h + 1}")
            out[i, h] = table[int(t) + h + 1]
    return out


def rescale(fc: Forecasts, normalizer: Normalizer, normalized: bool) -> Forecasts:
    if fc.normalized == normalized:
        return fc
    values = fc.values.copy()
    for i, e in enumerate(fc.entities):
        values[i] = normalizer.normalize_target(values[i], e) if normalized else normalizer.invert_target(values[i], e)
    return replace(fc, values=values, normalized=normalized)


def risk_table(fc: Forecasts, prepared: PreparedData, quantiles: Sequence[float]) -> dict[str, dict[float, float]]:
    """q-Risk per requested quantile on the normalised and the original scale."""
    out = {}
    for scale, normalized, series in (("normalized", True, prepared.series), ("original", False, prepared.raw)):
        f = rescale(fc, prepared.normalizer, normalized)
        y = actuals_for(f, series)
        row = {}
        for q in quantiles:
            if q not in f.quantiles:
                raise ConfigError(f"quantile {q} not among forecast quantiles {list(f.quantiles)}")
            row[q] = q_risk(y, f.values[..., f.quantiles.index(q)], q)
        out[scale] = row
    return out


# ---------------------------------------------------------------------------
# Ablation study
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    p50: float
    p90: float
    delta_p50: float  # percent change versus the base model
    delta_p90: float


def parse_flags(spec: str | Sequence[str]) -> list[str]:
    if isinstance(spec, str):
        spec = ABLATION_FLAGS if spec.strip() == "all" else [s.strip() for s in spec.split(",") if s.strip()]
    flags = list(spec)
    Ablations.from_names(flags)
    return flags


def ablation_study(
    prepared: PreparedData, cfg: RunConfig, flags: Sequence[str], seed: int
) -> list[AblationRow]:
    """Train the base model and each single-flag variant with identical seed and data.

    Scored by P50/P90 q-Risk on the test windows (validation windows when
    the test partition is empty), normalised scale.
    """
    flags = parse_flags(flags)
    split = train_split(prepared)
    eval_windows = split.test or split.val
    tcfg = replace(cfg.training_parameters, seed=seed)
    y = np.stack([w.target for w in eval_windows])
    scores = []
    for variant in ["base", *flags]:
        mcfg = cfg.model_config(prepared.schema, [] if variant == "base" else [variant])
        if not {0.5, 0.9} <= set(mcfg.quantiles):
            raise ConfigError("ablation scoring needs the 0.5 and 0.9 quantiles")
        model, _ = fit(TFTModel(mcfg, seed=seed), split.train, split.val, tcfg)
        yhat = predict(model, eval_windows).forecasts
        qs = list(mcfg.quantiles)
        scores.append(
            (variant, q_risk(y, yhat[..., qs.index(0.5)], 0.5), q_risk(y, yhat[..., qs.index(0.9)], 0.9))
        )
    b50, b90 = scores[0][1], scores[0][2]
    return [AblationRow(v, p50, p90, 100.0 * (p50 / b50 - 1.0), 100.0 * (p90 / b90 - 1.0)) for v, p50, p90 in scores]


def write_ablation_table(rows: Sequence[AblationRow], path: str | Path | None = None) -> str:
    lines = ["variant\tp50\tp90\tdelta_p50_pct\tdelta_p90_pct"]
    lines += [f"{r.variant}\t{r.p50:.6f}\t{r.p90:.6f}\t{r.delta_p50:.4f}\t{r.delta_p90:.4f}" for r in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
