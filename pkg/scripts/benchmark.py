"""Service rate and solution time for every solver on a deterministic suite.

    python3 scripts/benchmark.py --checkpoint runs/en8/final.pt --customers 8 --count 50
"""
import argparse
import logging

from vrpfth.bench import ExperimentConfig, run_experiment
from vrpfth.reinforce import FamilyConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint")
    parser.add_argument("--family", default="euclidean")
    parser.add_argument("--customers", type=int, default=8)
    parser.add_argument("--count", type=int, default=50)
    parser.add_argument("--output-dir", default="runs/benchmark")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    solvers = ["oracle", "greedy", "random", "ga", "vns"] + (["rl"] if args.checkpoint else [])
    cfg = ExperimentConfig(family=FamilyConfig(args.family, args.customers), sizes=[args.customers],
                           seeds=list(range(args.count)), solvers=solvers, checkpoint=args.checkpoint,
                           output_dir=args.output_dir)
    table, _, _ = run_experiment(cfg, ci=True)
    print(table.format())


if __name__ == "__main__":
    main()
