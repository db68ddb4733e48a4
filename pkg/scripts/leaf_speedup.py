#!/usr/bin/env python3
"""Wall time of the leaf-fit stage against the worker count.

Sixteen 64-location leaves (32x32 grid, M=2, K=(4,4), N=1000).  Also
confirms the root estimate does not depend on the worker count.
"""

import argparse
import os
import sys

import numpy as np

from mrri.runtime import execute, plan
from mrri.simulator import preset, simulate_dataset


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    args = ap.parse_args(argv)
    cfg = preset("sim2-desk", M=2, branching=(4, 4))
    data = simulate_dataset(cfg, 0)
    tree = cfg.partition()
    print(f"cpu_count={os.cpu_count()}")
    base, ref = None, None
    for w in args.workers:
        est = execute(plan(tree, "sequential", w), data, cfg.spec)
        t = est.diagnostics["timing"][f"leaf-fit@{tree.M}"]
        base = base or t
        ref = est.theta if ref is None else ref
        print(f"workers={w:<3} leaf stage {t:7.2f}s  speedup {base / t:5.2f}x  same root: {np.array_equal(ref, est.theta)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
