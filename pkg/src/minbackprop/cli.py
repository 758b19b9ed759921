"""Command-line harness.

Subcommands: p3p-example, toy-registration, toy-fundamental, gradcheck,
bench-essential. Common flags: --seed, --out (CSV), --json (summary),
--config (JSON file mirroring flag names; explicit flags win).

Exit codes: 0 success/pass, 1 acceptance failure, 2 usage error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import backward, experiments, numerics, solvers
from .ift import DimensionMismatch, NotARoot, RankDeficient

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (
    numerics.ConvergenceFailure,
    solvers.DegenerateConfiguration,
    solvers.NoRealSolution,
    solvers.EmptyCandidates,
    backward.DegenerateSpectrum,
    backward.TrackingFailure,
    NotARoot,
    RankDeficient,
    DimensionMismatch,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minbackprop",
        description="Minimal-problem solvers with implicit-differentiation backward passes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="base seed (u64)")
        p.add_argument("--out", type=str, default=None, help="CSV report path")
        p.add_argument("--json", dest="json_path", type=str, default=None,
                       help="JSON summary path")
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file; explicit flags override its values")

    p = sub.add_parser("p3p-example", help="reproduce the worked absolute-pose example")
    common(p)
    p.add_argument("--corrupt-self-test", action="store_true", default=None,
                   help="perturb the system first (negative control, exits nonzero)")

    for name, default_lr in (("toy-registration", 0.1), ("toy-fundamental", 1000.0)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} weight-training loop")
        common(p)
        p.add_argument("--iters", type=int, default=None, help="iterations (default 30)")
        p.add_argument("--lr", type=float, default=None,
                       help=f"learning rate (default {default_lr})")
        p.add_argument("--backward", type=str, default=None,
                       choices=["kkt-ift", "svd-closed-form", "finite-difference"],
                       help="backward method (default kkt-ift)")

    p = sub.add_parser("gradcheck", help="compare backward methods to the FD oracle")
    common(p)
    p.add_argument("--problem", type=str, default=None,
                   choices=["p3p", "registration", "fundamental", "essential"])
    p.add_argument("--trials", type=int, default=None, help="default 100")
    p.add_argument("--tol", type=float, default=None,
                   help="error tolerance (problem-specific default)")

    p = sub.add_parser("bench-essential", help="stability and timing benchmark")
    common(p)
    p.add_argument("--trials", type=int, default=None, help="default 1000 (min 100)")
    return parser


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Resolve option values: explicit flag > config file > default."""
    from_file: dict = {}
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            from_file = json.load(fh)
    merged = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
        elif key in from_file:
            merged[key] = from_file[key]
        else:
            merged[key] = default
    return merged


def _emit(report, out_path, json_path) -> None:
    if out_path:
        report.write_csv(out_path)
    if json_path:
        report.write_json(json_path)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "p3p-example":
            opts = _merge_config(args, {"corrupt_self_test": False})
            ok, report, lines = experiments.run_p3p_example(corrupt=opts["corrupt_self_test"])
            print("\n".join(lines))
            _emit(report, args.out, args.json_path)
            return EXIT_PASS if ok else EXIT_FAIL

        if args.command in ("toy-registration", "toy-fundamental"):
            opts = _merge_config(args, {"iters": 30, "lr": None, "backward": "kkt-ift",
                                        "seed": None, "n_points": None})
            cfg = experiments.ToyConfig(
                iters=opts["iters"], lr=opts["lr"], backward=opts["backward"],
                seed=opts["seed"], n_points=opts["n_points"])
            if args.command == "toy-registration":
                report = experiments.run_toy_registration(cfg)
            else:
                report = experiments.run_toy_fundamental(cfg)
            _emit(report, args.out, args.json_path)
            first, last = report.rows[0], report.rows[-1]
            print(f"{args.command}: {opts['iters']} iterations with {report.meta['backward']}")
            print(f"  loss {first[1]:.6e} -> {last[1]:.6e}")
            print(f"  final weights: {np.round(np.array(last[2:-3], dtype=float), 4)}")
            return EXIT_PASS

        if args.command == "gradcheck":
            opts = _merge_config(args, {"problem": None, "trials": 100, "seed": 0,
                                        "tol": None})
            if opts["problem"] is None:
                parser.error("gradcheck requires --problem")
            report = experiments.run_gradcheck(
                opts["problem"], opts["trials"], opts["seed"], opts["tol"])
            _emit(report, args.out, args.json_path)
            meta = report.meta
            print(f"gradcheck {meta['problem']}: max error {meta['max_error']:.3e} "
                  f"(tol {meta['tol']:.1e}), excluded {meta['excluded']}/{meta['trials']}")
            print("PASS" if meta["passed"] else "FAIL")
            return EXIT_PASS if meta["passed"] else EXIT_FAIL

        if args.command == "bench-essential":
            opts = _merge_config(args, {"trials": 1000, "seed": 0})
            if opts["trials"] < 100:
                parser.error("bench-essential requires --trials >= 100")
            report = experiments.run_bench_essential(opts["trials"], opts["seed"])
            _emit(report, args.out, args.json_path)
            meta = report.meta
            print(f"bench-essential over {meta['trials']} samples:")
            print(f"  median forward {meta['median_forward_ms']:.3f} ms, "
                  f"implicit backward {meta['median_ift_ms']:.3f} ms, "
                  f"oracle {meta['median_fd_ms']:.3f} ms")
            print(f"  speedup oracle/implicit: {meta['speedup_fd_over_ift']:.1f}x, "
                  f"stability {meta['stability_percent']:.1f}%")
            return EXIT_PASS

        parser.error(f"unknown command {args.command!r}")
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
