"""``seq2d`` command line: verify, analyze, train, compare.

Exit codes: 0 ok, 1 verification failure, 2 config or I/O error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .autodiff import NonFiniteActivationError
from .blockmap import MapFormatError, StateVector, deserialize
from .checks import run_checks
from .dynamics import DEFAULT_TOL, NonFiniteTrajectoryError, classify_impulse, find_fixed_point
from .experiment import ConfigError, ExperimentConfig, RunFailed, run_compare, run_train

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("seq2d")


def _err(msg):
    print(f"seq2d: {msg}", file=sys.stderr)


def cmd_verify(args) -> int:
    ctx = {"golden_dir": args.golden_dir} if args.golden_dir else {}
    results = run_checks(args.filter, ctx)
    if not results:
        _err(f"no checks match {args.filter!r}")
        return EXIT_CONFIG
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def _parse_h0(text, size):
    if text is None:
        return np.ones(size)
    try:
        values = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ConfigError(f"--h0 must be comma-separated numbers, got {text!r}") from None
    if values.size == 1:
        values = np.full(size, values[0])
    if values.size != size:
        raise ConfigError(f"--h0 has {values.size} values, block 0 holds {size}")
    return values


def analyze_map(m, h0, horizon=None, tol=DEFAULT_TOL) -> dict:
    """JSON-ready impulse class and fixed-point report for ``m`` started at ``h0``."""
    part = m.partition
    rest = [np.zeros(d) for d in part.sizes[1:]]
    v0 = StateVector.from_blocks([h0] + rest, part)
    # second probe differs from the first only in block 0
    probe = StateVector.from_blocks([h0 + 1.0 + np.abs(h0)] + rest, part)
    impulse = classify_impulse(m, [v0, probe], horizon, tol)
    max_k = impulse.horizon if horizon is not None else max(100, impulse.horizon)
    fp = find_fixed_point(m, v0, max_k, tol)
    return {
        "kind": m.kind,
        "class": impulse.kind,
        "impulse": {k: v for k, v in impulse.to_dict().items() if k != "kind"},
        "fixed_point": {"reached": fp.reached,
                        "at_iteration": fp.at_iteration if fp.reached else None,
                        "residual": fp.residual},
        "residuals": fp.residuals,
    }


def cmd_analyze(args) -> int:
    try:
        with open(args.map_file) as fh:
            m = deserialize(fh.read())
    except OSError as exc:
        _err(f"cannot read {args.map_file}: {exc.strerror}")
        return EXIT_CONFIG
    except MapFormatError as exc:
        _err(f"{args.map_file}: {exc}")
        return EXIT_CONFIG
    if args.tol <= 0 or (args.horizon is not None and args.horizon < 1):
        _err("--tol must be > 0 and --horizon >= 1")
        return EXIT_CONFIG
    h0 = _parse_h0(args.h0, m.partition[0])
    report = analyze_map(m, h0, args.horizon, args.tol)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _load_config(path):
    cfg = ExperimentConfig.load(path)
    if cfg.long_running:
        _err(f"warning: long-running config, about {cfg.work():.1e} multiply-adds per run")
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    runs = run_train(cfg, args.output_dir)
    for run in runs:
        last = [r for r in run["log"] if r["epoch"] == run["log"][-1]["epoch"]]
        scores = ", ".join(f"{r['split']} acc={r['accuracy']:.4f}" for r in last)
        print(f"run {run['run_id']} ({run['model']}, seed {run['seed']}): {scores}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    _, summary = run_compare(cfg, args.output_dir)
    for model, s in summary["models"].items():
        print(f"{model:8s} n={s['n']}  mean={s['mean']:.4f}  std={s['std']:.4f}  "
              f"min={s['min']:.4f}")
    if "mean_delta" in summary:
        print(f"|mean delta| = {summary['mean_delta']:.4f}   "
              f"max |delta| = {summary['max_abs_delta']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seq2d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--filter", help="only checks whose name contains this text")
    p.add_argument("--golden-dir", help="read golden maps from this directory")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="classify a map document's dynamics")
    p.add_argument("map_file")
    p.add_argument("--h0", help="block-0 start value(s), comma separated (default all ones)")
    p.add_argument("--horizon", type=int, help="iterations to probe (default 2 x blocks)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_analyze)

    for name, func, text in (("train", cmd_train, "train the configured architecture"),
                             ("compare", cmd_compare, "layered vs random runs")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("-o", "--output-dir", help="override the config's output_dir")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except RunFailed as exc:
        _err(f"non-finite values in {exc}")
        return EXIT_NUMERIC
    except (NonFiniteActivationError, NonFiniteTrajectoryError) as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
