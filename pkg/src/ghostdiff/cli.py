"""Command-line entry point: ``ghostdiff run | presets | compare``.

Exit codes: 0 success, 2 configuration error, 3 estimator or numerical error.
"""
from __future__ import annotations

import argparse
import json
import sys

from .experiment import (
    OUTPUT_ENV,
    ConfigError,
    compare_with_reference,
    preset_names,
    preset_text,
    resolve_config,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _diagnostic(kind: str, **fields) -> None:
    print(json.dumps({"error": kind, **fields}, sort_keys=True), file=sys.stderr)


def _cmd_run(args) -> int:
    try:
        cfg = resolve_config(args.config)
        progress = None if args.quiet else lambda tag, n: print(f"{tag}: {n} frames", file=sys.stderr)
        manifest = run_experiment(
            cfg, seed=args.seed, frames=args.frames, full=args.full, workers=args.workers,
            out_dir=args.out, progress=progress,
        )
    except ConfigError as exc:
        _diagnostic("config", field=exc.field, message=exc.message)
        return EXIT_CONFIG
    except (ArithmeticError, ValueError) as exc:
        _diagnostic("numerical", message=str(exc))
        return EXIT_NUMERIC
    for e in manifest.errors:
        _diagnostic("estimator", **e)
    print(manifest.output_dir)
    return EXIT_OK if manifest.ok else EXIT_NUMERIC


def _cmd_presets(args) -> int:
    if args.action == "list":
        for name in preset_names():
            print(name)
        return EXIT_OK
    if not args.name:
        _diagnostic("config", field="<preset>", message="presets show needs a preset name")
        return EXIT_CONFIG
    try:
        sys.stdout.write(preset_text(args.name))
    except ConfigError as exc:
        _diagnostic("config", field=exc.field, message=exc.message)
        return EXIT_CONFIG
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        report = compare_with_reference(
            args.pattern, args.prediction, args.tol, orders=args.orders,
            window_mm=args.window, center_mm=args.center, direction=args.direction,
        )
    except (OSError, ValueError, KeyError) as exc:
        _diagnostic("compare", message=str(exc))
        return EXIT_CONFIG
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghostdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config or preset")
    run.add_argument("config", help="YAML config file or preset name")
    run.add_argument("--seed", type=int, help="override source.master_seed")
    run.add_argument("--frames", type=int, help="override source.n_frames")
    run.add_argument("--full", action="store_true", help="use source.full_frames")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else the config's)")
    run.add_argument("--quiet", action="store_true", help="no frame counter on stderr")
    run.set_defaults(func=_cmd_run)

    pre = sub.add_parser("presets", help="list or print shipped presets")
    pre.add_argument("action", choices=["list", "show"])
    pre.add_argument("name", nargs="?")
    pre.set_defaults(func=_cmd_presets)

    cmp_ = sub.add_parser("compare", help="compare measured peak ratios with a prediction")
    cmp_.add_argument("pattern", help="peak table (.json) or pattern (.csv)")
    cmp_.add_argument("prediction", help="prediction .json")
    cmp_.add_argument("--tol", type=float, required=True, help="relative tolerance on ratios")
    cmp_.add_argument("--orders", type=int, nargs="+", help="orders to check (default all)")
    cmp_.add_argument("--window", type=float, help="peak window [mm] for CSV patterns")
    cmp_.add_argument("--center", type=float, default=0.0, help="x1 [mm] for CSV patterns")
    cmp_.add_argument("--direction", type=int, choices=[-1, 1], default=1,
                      help="-1 for fixed-pixel ghost patterns, 1 otherwise")
    cmp_.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
