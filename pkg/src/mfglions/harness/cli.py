"""Command line entry point.

    mfglions <subcommand> [--config PATH] [--seed U64] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical
non-convergence, 4 failed acceptance check (validate-lq, uniqueness,
convergence).  Any failure after the config has loaded also writes
error.json to the output directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import ConfigError, InvalidParameterError, NoConvergenceError, RegressionSingularError
from .config import RunConfig, load_config
from .experiments import RUNNERS, provenance, to_json

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4
VALIDATE_MODES = ("validate-lq", "uniqueness", "convergence")

__all__ = ["main", "run", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERIC", "EXIT_ACCEPT"]


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfglions", description="Mean field game FBSDE solver suite")
    ap.add_argument("subcommand", choices=sorted(RUNNERS) + ["show-config"])
    ap.add_argument("--config", help="JSON run configuration (default: built-in desk-scale config)")
    ap.add_argument("--seed", type=int, help="override mc.seed")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    return ap


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        fh.write(text)


def _error(kind, exc, code, cfg=None) -> dict:
    err = {"error": kind, "message": str(exc), "exit_code": code}
    if isinstance(exc, NoConvergenceError):
        err["where"] = exc.where
        err["history"] = exc.history
    if cfg is not None:
        err["provenance"] = provenance(cfg)
    return err


def run(subcommand: str, config_path=None, seed_override=None, out_dir="out") -> int:
    """Run one subcommand and write its artifacts; returns the exit status."""
    try:
        cfg = RunConfig() if config_path is None else load_config(config_path)
        if seed_override is not None:
            if seed_override < 0 or seed_override >= 2**64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(seed_override)
    except (ConfigError, InvalidParameterError) as exc:
        print(json.dumps(_error("config", exc, EXIT_CONFIG)), file=sys.stderr)
        return EXIT_CONFIG
    if subcommand == "show-config":
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    if subcommand not in RUNNERS:
        print(json.dumps(_error("config", f"unknown subcommand {subcommand!r}", EXIT_CONFIG)), file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        print(json.dumps(_error("config", exc, EXIT_CONFIG)), file=sys.stderr)
        return EXIT_CONFIG

    def fail(kind, exc, code):
        err = _error(kind, exc, code, cfg)
        _write(out_dir, "error.json", to_json(err))
        print(json.dumps(err), file=sys.stderr)
        return code

    try:
        outcome = RUNNERS[subcommand](cfg)
    except (ConfigError, InvalidParameterError) as exc:
        return fail("config", exc, EXIT_CONFIG)
    except (NoConvergenceError, RegressionSingularError, FloatingPointError) as exc:
        return fail("numerical", exc, EXIT_NUMERIC)
    summary = {
        "subcommand": subcommand,
        "metrics": outcome.summary,
        "passed": outcome.passed,
        "provenance": provenance(cfg),
    }
    for name, text in outcome.files.items():
        _write(out_dir, name, text)
    _write(out_dir, "summary.json", to_json(summary))
    if outcome.passed is False and subcommand in VALIDATE_MODES:
        return EXIT_ACCEPT
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors (unknown subcommand included)
        return EXIT_CONFIG if exc.code else EXIT_OK
    return run(args.subcommand, args.config, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
