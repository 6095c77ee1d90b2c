"""Served % against the time horizon on a fixed 8-customer suite, with a rendered plot.

    python3 scripts/horizon_sweep.py --checkpoint runs/en8/final.pt
"""
import argparse

from vrpfth.bench import ExperimentConfig, horizon_sweep
from vrpfth.reinforce import FamilyConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint")
    parser.add_argument("--horizons", default="6,12,18,24,30,36")
    parser.add_argument("--count", type=int, default=50)
    parser.add_argument("--output-dir", default="runs/sweep")
    args = parser.parse_args()

    solvers = ["oracle", "greedy", "random"] + (["rl"] if args.checkpoint else [])
    cfg = ExperimentConfig(family=FamilyConfig(customer_count=8), sizes=[8], seeds=list(range(args.count)),
                           solvers=solvers, checkpoint=args.checkpoint,
                           horizons=[float(u) for u in args.horizons.split(",")],
                           output_dir=args.output_dir, plot=True)
    for u, table in horizon_sweep(cfg).items():
        print(f"U = {u:g} h: " + ", ".join(f"{r.solver} {r.mean_served_pct:.1f}%" for r in table.rows))
    print(f"plot data and sweep.png in {args.output_dir}")


if __name__ == "__main__":
    main()
