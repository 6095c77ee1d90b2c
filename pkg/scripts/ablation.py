"""Train the full model and its three ablations with one recipe, then compare them.

    python3 scripts/ablation.py configs/eight_customer.json runs/ablation
"""
import argparse
import json
import logging

import torch

from vrpfth.bench import ABLATION_VARIANTS, ExperimentConfig, ablation_suite, train_ablation_variants
from vrpfth.reinforce import TrainingConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("output_dir")
    parser.add_argument("--count", type=int, default=50)
    parser.add_argument("--skip-training", action="store_true",
                        help="reuse <output_dir>/<variant>/final.pt from an earlier run")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    base = TrainingConfig.from_dict(json.load(open(args.config)))
    if args.skip_training:
        checkpoints = {v: f"{args.output_dir}/{v}/final.pt" for v in ABLATION_VARIANTS}
    else:
        checkpoints = train_ablation_variants(base, args.output_dir)
    cfg = ExperimentConfig(family=base.family, sizes=[base.family.customer_count],
                           seeds=list(range(args.count)), ablation_checkpoints=checkpoints,
                           output_dir=f"{args.output_dir}/table")
    table, manifest = ablation_suite(cfg)
    print(table.format())
    print(f"full-model config hash {manifest['full_config_hash']}")


if __name__ == "__main__":
    main()
