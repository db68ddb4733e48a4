#!/usr/bin/env python3
"""Run a Monte Carlo study for one preset and write the metrics table.

    python3 scripts/run_study.py sim1-desk --replicates 50 --out results/sim1.json
"""

import argparse
import json
import sys
import time

from mrri.simulator import PRESETS, preset, run_study


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("preset", choices=PRESETS)
    ap.add_argument("--replicates", type=int)
    ap.add_argument("--N", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="JSON destination (table, config and per-replicate records)")
    args = ap.parse_args(argv)

    overrides = {k: v for k, v in (("replicates", args.replicates), ("N", args.N), ("seed", args.seed)) if v is not None}
    cfg = preset(args.preset, **overrides)
    t0 = time.perf_counter()

    def progress(rec):
        done = rec["replicate_id"] + 1
        print(f"  replicate {done}/{cfg.replicates}  {time.perf_counter() - t0:7.1f}s", file=sys.stderr, flush=True)

    table = run_study(cfg, workers=args.workers, progress=progress)
    print(table.to_text())
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table.to_dict(), fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
