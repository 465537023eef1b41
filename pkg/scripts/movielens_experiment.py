"""MovieLens-100k comparison: bACCAMS vs equal-size single co-clustering vs global mean.

Runs three random 90:10 splits and prints per-split and averaged held-out
RMSE. With --curve, also writes the bits-vs-RMSE curve of a greedy ACCAMS
fit on the first split.

    python scripts/fetch_movielens.py
    python scripts/movielens_experiment.py --curve results/ml100k_curve.csv
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from accams.evaluation import size_accuracy_curve
from accams.experiments import ComparisonConfig, compare_on_split
from accams.kmeans import FitOptions, fit_accams
from accams.matrix import load_triples, split_train_test

DATA = Path(__file__).resolve().parent.parent / "data" / "ml-100k.tsv"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", type=Path, default=DATA)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--s", type=int, default=20)
    p.add_argument("--burn-in", type=int, default=30)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--splits", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve", type=Path, default=None, help="write an ACCAMS size/RMSE CSV")
    p.add_argument("--json", type=Path, default=None, help="write per-split results as JSON")
    args = p.parse_args()

    if not args.data.exists():
        sys.exit(f"{args.data} not found; run scripts/fetch_movielens.py first")
    data = load_triples(args.data.read_bytes())
    print(f"data: {data.n_rows} x {data.n_cols}, E={data.nnz}")
    cfg = ComparisonConfig(k=args.k, s=args.s, burn_in=args.burn_in, n_samples=args.samples,
                           seed=args.seed)

    def report(r):
        print(f"split {r.split_seed}: bACCAMS {r.baccams_rmse:.4f} ({r.baccams_bits} bits, "
              f"{r.baccams_seconds:.0f}s)  co-clustering k={r.cocluster_k} "
              f"{r.cocluster_rmse:.4f} ({r.cocluster_bits} bits)  mean {r.mean_rmse:.4f}",
              flush=True)

    results = [compare_on_split(data, s, cfg, log=report) for s in range(args.splits)]
    for name in ("baccams_rmse", "cocluster_rmse", "mean_rmse"):
        print(f"average {name}: {np.mean([getattr(r, name) for r in results]):.4f}")
    if args.json:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps([r.as_dict() for r in results], indent=2))

    if args.curve:
        train, test = split_train_test(data, cfg.test_fraction, 0)
        model = fit_accams(train, FitOptions(k=args.k, s=args.s, seed=args.seed))
        args.curve.parent.mkdir(parents=True, exist_ok=True)
        args.curve.write_text(size_accuracy_curve(model, train, test).to_csv())
        print(f"wrote {args.curve}")


if __name__ == "__main__":
    main()
