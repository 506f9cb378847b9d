"""Base model versus each single-component ablation on a synthetic panel."""

import argparse

from tft.data import SynthParams, synth_generate, synth_schema
from tft.model import ABLATION_FLAGS
from tft.pipeline import (
    DatasetDetails,
    NetworkParameters,
    RunConfig,
    ablation_study,
    prepare_data,
    write_ablation_table,
)
from tft.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", default="seasonal")
    ap.add_argument("--entities", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default=None, help="optional TSV path")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    params = SynthParams(n_entities=args.entities, length=300, period=24, harmonics=3)
    cfg = RunConfig(
        DatasetDetails(k=48, tau_max=12, train_frac=0.7, val_frac=0.15),
        NetworkParameters(d_model=16, dropout=0.1),
        TrainConfig(max_epochs=args.epochs, samples_per_epoch=1024, max_val_samples=512),
    )
    schema = synth_schema(args.kind, params)
    prepared = prepare_data(synth_generate(args.kind, params, args.seed), schema, cfg.dataset_details)
    rows = ablation_study(prepared, cfg, ABLATION_FLAGS, args.seed)
    print(write_ablation_table(rows, args.out), end="")


if __name__ == "__main__":
    main()
