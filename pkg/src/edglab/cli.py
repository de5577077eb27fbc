"""Command line entry point: ``edg <command> --config run.json``.

Exit status: 0 when every declared check passes, 1 when a check fails or the
run errors, 2 on usage or config errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import ConfigError, ExperimentConfig, parse_rho_grid, run

COMMANDS = {
    "simulate": "simulate",
    "equilibrium": "equilibrium",
    "phase-diagram": "phase_diagram",
    "contraction": "contraction",
    "relax": "relaxation",
    "verify": "verify",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edg", description="Exchange-driven growth laboratory")
    p.add_argument("command", choices=sorted(COMMANDS), help="experiment to run")
    p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default: ./edg-<command>)")
    p.add_argument("--rho-grid", default=None, metavar="LO:HI:N",
                   help="mass grid for phase-diagram")
    p.add_argument("--quiet", action="store_true", help="suppress the summary")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text(encoding="utf-8")
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw["experiment"] = COMMANDS[args.command]
        if args.rho_grid is not None:
            raw["rho_grid"] = list(parse_rho_grid(args.rho_grid))
        cfg = ExperimentConfig.from_dict(raw)
    except OSError as exc:
        print(f"edg: cannot read config: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"edg: config error at line {exc.lineno}: {exc.msg}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"edg: config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(f"edg-{args.command}")
    manifest = run(cfg, out)
    if not args.quiet:
        for c in manifest.checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value} (threshold {c.threshold})"
                  + (f" {c.note}" if c.note else ""))
        if manifest.regime:
            print(f"regime: {manifest.regime}")
        if manifest.error:
            print(f"error: {manifest.error}", file=sys.stderr)
        print(f"outputs in {out}/")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
