"""Command-line entry point: ``expandfilt {denoise,ssl,validate,gen-data}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .exceptions import ConditioningError, InputError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expandfilt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("denoise", "denoising experiment over the configured SNRs"),
                        ("ssl", "label inference with incoming nodes"),
                        ("validate", "closed-form moments against the Monte-Carlo oracle"),
                        ("gen-data", "write a synthetic instance as edge list and CSV files")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON file of flat config keys")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        sp.add_argument("--full-scale", action="store_true", help="use the full instance sizes")
        if name == "gen-data":
            sp.add_argument("--task", choices=[ex.DENOISE, ex.SSL], default=None,
                            help="which kind of instance to generate")
    return p


def _config(args):
    raw = ex.read_config_file(args.config) if args.config else {}
    if args.command in (ex.DENOISE, ex.SSL):
        task = args.command
    elif args.command == "validate":
        task = ex.VALIDATE
    else:
        task = args.task or raw.get("task") or ex.DENOISE
        if task not in (ex.DENOISE, ex.SSL):
            raise InputError(f"gen-data needs task denoise or ssl, got {task!r}")
    raw.update({"task": task, **({"seed": args.seed} if args.seed is not None else {})})
    return ex.resolve_config(raw, args.full_scale)


def _print_checks(results):
    for r in results:
        verdict = "PASS" if r.passed else "FAIL"
        print(f"{r.name:14s} max_abs_z={r.max_abs_z:.4g} {verdict} ({r.detail})")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except InputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            results = ex.run_validation(cfg)
            _print_checks(results)
            args.out.mkdir(parents=True, exist_ok=True)
            rows = [{"check": r.name, "max_abs_z": r.max_abs_z, "passed": r.passed, "detail": r.detail}
                    for r in results]
            ex.write_csv(args.out / "validation.csv", ["check", "max_abs_z", "passed", "detail"], rows)
            ex.write_manifest(cfg, args.out / "manifest.txt", {})
            return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION
        if args.command == "gen-data":
            files = ex.generate_data(cfg, args.out)
            ex.write_manifest(cfg, args.out / "manifest.txt", {"files": ",".join(files)})
            print(f"wrote {len(files)} files to {args.out}")
            return EXIT_OK
        result = ex.run_denoising(cfg) if args.command == ex.DENOISE else ex.run_ssl(cfg)
        ex.write_outputs(cfg, result, args.out)
        for row in ex.result_rows(cfg, result["outcomes"]):
            print(f"{row['setting']:24s} {row['method']:5s} {row['metric']:10s} "
                  f"{row['mean']:.6g} +- {row['std']:.3g} {row['status']}")
        failed = [o for o in result["outcomes"] if o.status != "ok"]
        return EXIT_NUMERICAL if failed else EXIT_OK
    except InputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConditioningError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
