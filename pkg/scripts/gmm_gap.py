#!/usr/bin/env python3
"""Distance between the closed-form meta-estimate and the iterative GMM minimizer.

Two leaves on a 6x6 stationary grid.  The gap should shrink like 1/N since
the closed form is a one-step linearisation of the GMM estimating equation.

    python3 scripts/gmm_gap.py --N 2000 8000 32000 --reps 3
"""

import argparse
import sys

import numpy as np

from mrri.domain import build_partition
from mrri.integration import gmm_oracle, reduce_node
from mrri.likelihood import fit_local_mle, per_observation_scores
from mrri.simulator import preset, simulate_dataset


def gap(N, rep):
    cfg = preset("sim1-desk", boxes=[[(1, 6), (1, 6)]], N=N)
    data = simulate_dataset(cfg, rep)
    tree = build_partition(cfg.domain(), 1, (2,), min_leaf_size=9)
    blocks = [data.block(tree.nodes[p], p) for p in tree.leaves()]
    fits = [fit_local_mle(b, cfg.spec) for b in blocks]
    meta = reduce_node((), [f.scores for f in fits], [f.theta for f in fits]).estimate
    stacked = np.hstack([f.scores.values for f in fits])
    V = stacked.T @ stacked

    def producer(theta):
        return np.hstack([per_observation_scores(b, theta, cfg.spec).values for b in blocks])

    oracle = gmm_oracle(producer, V, meta.theta)
    diff = np.abs(meta.theta - oracle)
    return float(np.max(diff / np.abs(oracle))), float(np.max(diff / meta.se))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[2000, 8000, 32000])
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'N':>7} {'max rel. gap':>14} {'max gap / SE':>14}")
    for N in args.N:
        rows = np.array([gap(N, r) for r in range(args.reps)])
        print(f"{N:>7} {rows[:, 0].mean():>14.2e} {rows[:, 1].mean():>14.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
