"""Command-line entry point: ``tft <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSchema, Normalizer, SynthParams, load_csv, synth_generate, synth_schema, write_csv
from .errors import ConfigError, DataError, DimensionError, NumericError, TFTError
from .interpret import (
    aggregate_importance,
    group_by_entity,
    regime_distance,
    temporal_patterns,
    write_importance,
    write_patterns,
    write_regimes,
)
from .model import TFTModel
from .pipeline import (
    PARTITIONS,
    DatasetDetails,
    PreparedData,
    RunConfig,
    ablation_study,
    dump_json,
    forecast,
    parse_flags,
    prepare_data,
    read_forecasts,
    risk_table,
    train_split,
    write_ablation_table,
    write_forecasts,
)
from .training import SearchSpace, fit, predict, quantile_crossings, random_search


def resolve_seed(arg: int | None, fallback: int = 0) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("TFT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"TFT_SEED must be an integer, got {env!r}") from exc
    return fallback


def _csv_header(path: Path) -> list[str]:
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return fh.readline().strip().split(",")


def _load_with_checkpoint(args) -> tuple[TFTModel, PreparedData]:
    model, meta = load_checkpoint(args.checkpoint)
    schema = DatasetSchema.from_dict(meta["schema"])
    missing = {c.name for c in schema.columns} - set(_csv_header(Path(args.data)))
    if missing:
        raise ConfigError(f"{args.data} does not match the checkpoint schema; missing columns {sorted(missing)}")
    details = DatasetDetails(**meta["dataset_details"])
    normalizer = Normalizer.from_dict(meta["normalizer"], schema)
    return model, prepare_data(load_csv(args.data, schema), schema, details, normalizer)


def _windows(prepared: PreparedData, partition: str):
    wins = prepared.windows(partition)
    if not wins:
        raise DataError(f"partition {partition!r} has no windows; choose another with --split")
    return wins


def _atomic_write(write, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    params = json.loads(Path(args.params).read_text()) if args.params else {}
    for key in ("n_entities", "length", "period", "harmonics", "noise"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    p = SynthParams.from_dict(params)
    seed = resolve_seed(args.seed)
    schema = synth_schema(args.kind, p)
    write_csv(synth_generate(args.kind, p, seed), schema, args.out)
    if args.schema_out:
        dump_json(schema.to_dict(), args.schema_out)
    print(f"wrote {p.n_entities} entities x {p.length} steps to {args.out}")


def cmd_train(args) -> None:
    schema = DatasetSchema.load(args.schema)
    cfg = RunConfig.load(args.config)
    seed = resolve_seed(args.seed, cfg.training_parameters.seed)
    cfg.training_parameters.seed = seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "model.tftc", "history": out / "history.jsonl", "manifest": out / "manifest.json"}
    manifest = {
        "tool_version": __version__,
        "seed": seed,
        "config": cfg.to_dict(),
        "schema": schema.to_dict(),
        "data": str(args.data),
        "artifacts": {k: str(v) for k, v in paths.items()},
        "timings": {},
    }
    dump_json(manifest, paths["manifest"])

    t0 = time.perf_counter()
    prepared = prepare_data(load_csv(args.data, schema), schema, cfg.dataset_details)
    split = train_split(prepared)
    model = TFTModel(cfg.model_config(schema), seed=seed)
    manifest["model_config"] = model.config.to_dict()
    t1 = time.perf_counter()
    _, history = fit(model, split.train, split.val, cfg.training_parameters, paths["history"], log_wall_time=False)
    t2 = time.perf_counter()
    extra = {
        "schema": schema.to_dict(),
        "normalizer": prepared.normalizer.to_dict(),
        "dataset_details": asdict(cfg.dataset_details),
        "training_parameters": asdict(cfg.training_parameters),
    }
    _atomic_write(lambda p: save_checkpoint(model, p, extra), paths["checkpoint"])
    manifest["timings"] = {
        "prepare_s": t1 - t0,
        "fit_s": t2 - t1,
        "epoch_wall_s": [e.wall_time for e in history.epochs],
    }
    manifest["best_epoch"] = history.best_epoch
    manifest["best_val_loss"] = history.best_val_loss
    dump_json(manifest, paths["manifest"])
    print(f"trained {len(history.epochs)} epochs; best val loss {history.best_val_loss:.6f} at epoch {history.best_epoch}")
    print(f"checkpoint: {paths['checkpoint']}")


def cmd_predict(args) -> None:
    model, prepared = _load_with_checkpoint(args)
    fc = forecast(model, prepared, _windows(prepared, args.split), normalized=args.normalized)
    write_forecasts(fc, args.out)
    print(f"wrote {len(fc.entities)} forecasts x {fc.values.shape[1]} horizons to {args.out}")


def cmd_evaluate(args) -> None:
    model, prepared = _load_with_checkpoint(args)
    quantiles = [float(q) for q in args.quantiles.split(",")]
    if args.forecasts:
        fc = read_forecasts(args.forecasts, normalized=args.normalized)
    else:
        fc = forecast(model, prepared, _windows(prepared, args.split), normalized=True)
    table = risk_table(fc, prepared, quantiles)
    cols = [f"P{round(q * 100):d}" for q in quantiles]
    print("q-Risk".ljust(12) + "".join(c.rjust(10) for c in cols))
    for scale, row in table.items():
        print(scale.ljust(12) + "".join(f"{row[q]:10.4f}" for q in quantiles))
    crossings = quantile_crossings(fc.values)
    print(f"quantile crossings: {crossings} of {fc.values.shape[0] * fc.values.shape[1]}")
    if args.out:
        dump_json(
            {"q_risk": {s: {str(q): v for q, v in row.items()} for s, row in table.items()}, "crossings": crossings},
            args.out,
        )


def cmd_ablate(args) -> None:
    schema = DatasetSchema.load(args.schema)
    cfg = RunConfig.load(args.config)
    flags = parse_flags(args.flags)
    seed = resolve_seed(args.seed, cfg.training_parameters.seed)
    prepared = prepare_data(load_csv(args.data, schema), schema, cfg.dataset_details)
    rows = ablation_study(prepared, cfg, flags, seed)
    print(write_ablation_table(rows, args.out), end="")


def cmd_interpret(args) -> None:
    model, prepared = _load_with_checkpoint(args)
    wins = _windows(prepared, args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = predict(model, wins)
    k = model.config.k
    if args.report == "importance":
        paths = [out_dir / "importance.tsv"]
        write_importance(aggregate_importance([outputs], model.config), paths[0])
    elif args.report == "patterns":
        horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else None
        paths = write_patterns(temporal_patterns(outputs.attention, k, horizons), out_dir)
    else:
        regimes = regime_distance(group_by_entity(wins, outputs.attention), k, args.threshold)
        paths = write_regimes(regimes, out_dir)
        n = sum(len(e.intervals) for e in regimes.entities)
        print(f"{n} flagged interval(s) at threshold {args.threshold}")
    for p in paths:
        print(p)


def cmd_search(args) -> None:
    schema = DatasetSchema.load(args.schema)
    cfg = RunConfig.load(args.config)
    space = SearchSpace(**json.loads(Path(args.space).read_text())) if args.space else SearchSpace()
    seed = resolve_seed(args.seed, cfg.training_parameters.seed)
    prepared = prepare_data(load_csv(args.data, schema), schema, cfg.dataset_details)
    split = train_split(prepared)
    trials = random_search(
        space, split.train, split.val, cfg.model_config(schema), cfg.training_parameters, args.budget, seed
    )
    lines = [json.dumps({"rank": r, "trial": t.index, "val_loss": t.val_loss, **t.params}) for r, t in enumerate(trials)]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tft", description="Temporal Fusion Transformer toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset and its schema")
    p.add_argument("--kind", choices=("seasonal", "regime_switch", "noise_features"), default="seasonal")
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out")
    p.add_argument("--params", help="JSON file of generator parameters")
    p.add_argument("--entities", dest="n_entities", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--period", type=int)
    p.add_argument("--harmonics", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("predict", cmd_predict, "write a forecast CSV"),
        ("evaluate", cmd_evaluate, "print q-Risk"),
        ("interpret", cmd_interpret, "write interpretability reports"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=PARTITIONS, default="all" if name == "predict" else "test")
        p.set_defaults(func=func)
        if name == "predict":
            p.add_argument("--out", required=True)
            p.add_argument("--normalized", action="store_true", help="keep the normalised scale")
        elif name == "evaluate":
            p.add_argument("--quantiles", default="0.5,0.9")
            p.add_argument("--forecasts", help="score this forecast CSV instead of running the model")
            p.add_argument("--normalized", action="store_true", help="the --forecasts file is normalised")
            p.add_argument("--out", help="also write the full-precision table as JSON")
        else:
            p.add_argument("--report", choices=("importance", "patterns", "regimes"), required=True)
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--threshold", type=float, default=0.3)
            p.add_argument("--horizons", help="comma-separated horizons for pattern curves")

    p = sub.add_parser("ablate", help="train the base model and single-flag ablations")
    p.add_argument("--config", "--checkpoint-config", dest="config", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--flags", default="all", help="'all' or a comma-separated list (may be empty)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--config", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--space", help="JSON file overriding the search grid")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_search)
    return ap


EXIT_CODES = ((ConfigError, 2), (DimensionError, 2), (DataError, 3), (NumericError, 4))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except TFTError as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                break
        else:
            code = 1
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
