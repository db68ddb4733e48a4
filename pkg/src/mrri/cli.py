"""Batch command line: ``mrri <subcommand> [options]``.

Every JSON output carries a ``provenance`` record (tool and library
versions, the command, a hash of the resolved arguments and the seed), and
contains no timestamps so identical invocations give identical files.
Usage errors exit with status 2; failures inside the library exit with 1
and print a JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from .domain import PartitionTree, SpatialDomain, build_partition, parse_path, path_key
from .errors import MRRIError
from .estimates import MetaEstimate
from .inference import wald_interval, z_contrast
from .integration import IntegrationOptions, RidgePolicy, recursive_integrate, sequential_integrate
from .likelihood import FitOptions, fit_local_mle
from .model import ModelSpec
from .runtime import read_dataset, read_header, write_dataset
from .simulator import PRESETS, preset, run_study, simulate_dataset


def _provenance(args: argparse.Namespace) -> dict:
    import scipy

    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    blob = json.dumps(resolved, sort_keys=True, default=str)
    return {
        "tool": "mrri",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "command": args.command,
        "arguments": json.loads(blob),
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
        "seed": args.seed,
    }


def _emit(args, payload: dict, text: str | None = None) -> None:
    payload = dict(payload)
    payload["provenance"] = _provenance(args)
    body = json.dumps(payload, indent=2, default=_default)
    if getattr(args, "out", None):
        with open(args.out, "w") as fh:
            fh.write(body + "\n")
        if text:
            print(text)
    else:
        if text:
            print(text)
        print(body)


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "replicates", None) is not None:
        overrides["replicates"] = args.replicates
    if getattr(args, "N", None) is not None:
        overrides["N"] = args.N
    if args.min_leaf_size is not None:
        overrides["min_leaf_size"] = args.min_leaf_size
    if getattr(args, "estimators", None):
        overrides["estimators"] = tuple(args.estimators.split(","))
    overrides["fit"] = _fit_opts(args)
    overrides["ridge_max"] = args.ridge_max
    return preset(args.preset, **overrides)


def _fit_opts(args) -> FitOptions:
    return FitOptions(tol=args.tol, max_iter=args.max_iter)


def _integration_opts(args) -> IntegrationOptions:
    return IntegrationOptions(fit=_fit_opts(args), ridge=RidgePolicy(max_eps=args.ridge_max), workers=args.workers)


def _spec(args) -> ModelSpec:
    if args.spec:
        with open(args.spec) as fh:
            return ModelSpec.from_dict(json.load(fh))
    if args.preset:
        return preset(args.preset).spec
    raise MRRIError("a model layout is required: pass --spec FILE or --preset NAME")


def _tree(path) -> PartitionTree:
    with open(path) as fh:
        data = json.load(fh)
    return PartitionTree.from_dict(data.get("partition", data))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    data = simulate_dataset(cfg, args.replicate_id)
    write_dataset(args.out, data)
    side = {"dataset": os.path.basename(args.out), "config": cfg.to_dict(), "replicate_id": args.replicate_id,
            "spec": cfg.spec.to_dict(), "theta_true": list(cfg.theta_true)}
    side["provenance"] = _provenance(args)
    with open(args.out + ".json", "w") as fh:
        json.dump(side, fh, indent=2)
    print(json.dumps({"written": args.out, "N": data.N, "S": data.S, "q": data.q, "d": data.d}))
    return 0


def cmd_partition(args) -> int:
    if args.dataset:
        src = read_dataset(args.dataset)
        domain = SpatialDomain(src.coords, src.roi)
        M = args.M
        branching = tuple(int(k) for k in args.branching.split(",")) if args.branching else ()
        strategy = args.strategy
    elif args.preset:
        cfg = preset(args.preset)
        domain = cfg.domain()
        M = cfg.M if args.M is None else args.M
        branching = cfg.branching if not args.branching else tuple(int(k) for k in args.branching.split(","))
        strategy = args.strategy or cfg.strategy
    else:
        raise MRRIError("partition needs --dataset or --preset")
    if M is None:
        M = len(branching)
    min_leaf = 25 if args.min_leaf_size is None else args.min_leaf_size
    tree = build_partition(domain, M, branching, strategy or "coordinate-split", min_leaf)
    sizes = {path_key(p): int(tree.nodes[p].size) for p in tree.leaves()}
    _emit(args, {"partition": tree.to_dict(), "leaf_sizes": sizes})
    return 0


def cmd_fit(args) -> int:
    src = read_dataset(args.dataset)
    tree = _tree(args.partition)
    node = parse_path(args.node)
    if node not in tree.nodes:
        raise MRRIError(f"node {args.node} is not in the partition")
    est = fit_local_mle(src.block(tree.nodes[node], node), _spec(args), opts=_fit_opts(args))
    payload = est.to_dict()
    payload["se"] = est.se.tolist()
    _emit(args, {"estimate": payload})
    return 0


def cmd_integrate(args) -> int:
    src = read_dataset(args.dataset)
    tree = _tree(args.partition)
    spec = _spec(args)
    opts = _integration_opts(args)
    nodes: dict = {}
    if args.sequential:
        est = sequential_integrate(tree, src, spec, opts, nodes=nodes)
    else:
        est = recursive_integrate(tree, src, spec, opts, nodes=nodes)
    payload = {"estimate": est.to_dict(), "se": est.se.tolist(), "spec": spec.to_dict()}
    if args.all_nodes:
        payload["nodes"] = {path_key(p): e.to_dict() for p, e in sorted(nodes.items(), key=lambda t: (len(t[0]), t[0]))}
    _emit(args, payload)
    return 0


def _component(est: MetaEstimate, token: str) -> int:
    token = token.strip()
    if token.lstrip("-").isdigit():
        return int(token)
    if token in est.names:
        return est.names.index(token)
    raise MRRIError(f"unknown component {token!r}; names are {', '.join(est.names)}")


def cmd_test(args) -> int:
    with open(args.estimate) as fh:
        data = json.load(fh)
    est = MetaEstimate.from_dict(data.get("estimate", data))
    out: dict = {"estimate_file": os.path.basename(args.estimate)}
    if args.contrast:
        a, b = args.contrast.split(",")
        out["test"] = z_contrast(est, _component(est, a), _component(est, b), args.rho0).to_dict()
    if args.interval:
        q = _component(est, args.interval)
        lo, hi = wald_interval(est, q, args.level)
        out["interval"] = {"component": q, "name": est.names[q] if est.names else str(q),
                           "level": args.level, "lower": lo, "upper": hi}
    if len(out) == 1:
        raise MRRIError("test needs --contrast and/or --interval")
    _emit(args, out)
    return 0


def cmd_study(args) -> int:
    cfg = _config(args)
    table = run_study(cfg, workers=args.workers)
    _emit(args, table.to_dict(include_records=not args.no_records), text=table.to_text())
    return 0


def cmd_info(args) -> int:
    path = args.file
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == b"MRRIDATA":
        out = {"kind": "dataset", **read_header(path)}
    else:
        with open(path) as fh:
            data = json.load(fh)
        out = {"kind": "json", "keys": sorted(data)}
        if "partition" in data:
            tree = PartitionTree.from_dict(data["partition"])
            out.update(kind="partition", M=tree.M, branching=list(tree.branching), S=tree.S,
                       leaves=len(tree.leaves()), strategy=tree.strategy)
        if "estimate" in data:
            out.update(kind="estimate", method=data["estimate"].get("method"), p=data["estimate"].get("p"))
    print(json.dumps(out, indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed for simulation")
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument("--ridge-max", type=float, default=1e-6, help="largest ridge level for V")
    common.add_argument("--tol", type=float, default=1e-6, help="scaled gradient tolerance for leaf fits")
    common.add_argument("--max-iter", type=int, default=500, help="iteration cap for leaf fits")
    common.add_argument("--min-leaf-size", type=int, default=None, help="smallest allowed leaf")

    p = argparse.ArgumentParser(prog="mrri", description="Multi-resolution recursive integration for spatial GPs")
    p.add_argument("--version", action="version", version=f"mrri {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate one replicate to a dataset file")
    s.add_argument("--preset", required=True, choices=PRESETS)
    s.add_argument("--replicate-id", type=int, default=0)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("partition", parents=[common], help="build a recursive partition")
    s.add_argument("--dataset")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--M", type=int, default=None)
    s.add_argument("--branching", help="comma-separated branching factors, e.g. 2,2,4")
    s.add_argument("--strategy", choices=("coordinate-split", "roi-balanced-coordinate-split"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("fit", parents=[common], help="maximum likelihood on one partition node")
    s.add_argument("--dataset", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--node", required=True, help="node path such as 1.2 (0 for the root)")
    s.add_argument("--spec", help="model layout JSON")
    s.add_argument("--preset", choices=PRESETS, help="take the model layout from a preset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("integrate", parents=[common], help="integrate leaf fits to a root estimate")
    s.add_argument("--dataset", required=True)
    s.add_argument("--partition", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--recursive", action="store_true")
    g.add_argument("--sequential", action="store_true")
    s.add_argument("--spec")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--all-nodes", action="store_true", help="also write every node estimate")
    s.add_argument("--out")
    s.set_defaults(func=cmd_integrate)

    s = sub.add_parser("test", parents=[common], help="contrast test or Wald interval from an estimate")
    s.add_argument("--estimate", required=True)
    s.add_argument("--contrast", help="two components, by index or name, e.g. 3,6")
    s.add_argument("--rho0", type=float, default=0.0)
    s.add_argument("--interval", help="component for a Wald interval")
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--out")
    s.set_defaults(func=cmd_test)

    s = sub.add_parser("study", parents=[common], help="Monte Carlo study of a preset")
    s.add_argument("--preset", required=True, choices=PRESETS)
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--estimators", help="comma-separated: recursive,sequential,full-mle")
    s.add_argument("--no-records", action="store_true", help="omit per-replicate records from the JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("info", parents=[common], help="describe a dataset, partition or estimate file")
    s.add_argument("file")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (MRRIError, ValueError, KeyError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("stage", "path"):
            if hasattr(exc, attr):
                err[attr] = getattr(exc, attr)
        print(json.dumps(err, default=str), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
