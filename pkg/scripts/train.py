"""Train one policy from a JSON recipe and report held-out greedy service against the oracle.

    python3 scripts/train.py configs/eight_customer.json runs/en8
"""
import argparse
import json
import logging

import numpy as np
import torch

from vrpfth.baselines import oracle_exact
from vrpfth.reinforce import TrainingConfig, greedy_served, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("output_dir")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--holdout", type=int, default=50)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    payload = json.load(open(args.config))
    cfg = TrainingConfig.from_dict({**payload, "seed": args.seed, "output_dir": args.output_dir})

    def progress(rec):
        if rec["batch"] % 100 == 0:
            logging.info("batch %5d  return %.3f  served %.1f%%", rec["batch"], rec["mean_return"],
                         rec["served_pct"])

    report, model = train(cfg, progress=progress)
    holdout = cfg.family.holdout(args.holdout)
    rl = np.mean(greedy_served(model, holdout))
    oracle = np.mean([oracle_exact(inst).served_count for inst in holdout])
    print(f"greedy served {rl:.2f} vs oracle {oracle:.2f} (ratio {rl / oracle:.3f}); "
          f"checkpoint {report.checkpoints[-1]}")


if __name__ == "__main__":
    main()
