"""Command line entry point: ``magnetorbit <mode> --config <path> [--out <dir>] [--threads <n>] [--svg]``."""
from __future__ import annotations

import argparse
import os
import sys

from .config import MODES, parse_config
from .exceptions import MagnetorbitError, SchemaError
from .outputs import IoError

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="magnetorbit", description="Magnetic orbit tracing and magnetotransport.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--threads", type=int, help="worker threads (falls back to MAGNETORBIT_THREADS, then 1)")
    p.add_argument("--svg", action="store_true", help="also write SVG renderings")
    return p


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("MAGNETORBIT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise SchemaError(f"MAGNETORBIT_THREADS={env!r} is not an integer", ("threads",)) from None
    return 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), mode=args.mode)
        threads = _threads(args.threads)
        if threads < 1:
            raise SchemaError(f"threads must be >= 1, got {threads}", ("threads",))
        cfg.dispersion() if "quasi" not in cfg["model"] else cfg.quasiperiodic()
    except OSError as exc:
        print(f"magnetorbit: cannot read config: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SchemaError, ValueError) as exc:
        where = ".".join(str(p) for p in getattr(exc, "path", ()))
        print(f"magnetorbit: config error{' at ' + where if where else ''}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA

    from .pipeline import run_pipeline
    try:
        manifest, _ = run_pipeline(cfg, args.out, threads, args.svg or None)
    except MagnetorbitError as exc:
        stage = getattr(exc, "stage", "?")
        print(f"magnetorbit: numerical failure in stage {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IoError as exc:
        print(f"magnetorbit: {exc}", file=sys.stderr)
        return 1
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
