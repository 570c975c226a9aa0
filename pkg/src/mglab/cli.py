"""Command line entry point: ``lab run | list | validate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import lab
from .errors import ConfigurationError, LabError
from .scenarios import list_scenarios


def _parser():
    p = argparse.ArgumentParser(prog="lab", description="Martingale-problem verification lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run the full pipeline for a config file")
    r.add_argument("config")
    r.add_argument("--out", default="lab_out", help="output directory (default: lab_out)")
    r.add_argument("--seed", type=int)
    r.add_argument("--dt", type=float)
    r.add_argument("--paths", type=int)
    sub.add_parser("list", help="list preset scenarios")
    v = sub.add_parser("validate", help="parse and validate a config file")
    v.add_argument("config")
    return p


def _print_checks(summary, out):
    for name, c in summary.get("checks", {}).items():
        print(f"  {name:16s} {'pass' if c['pass'] else 'FAIL'}", file=out)


def main(argv=None, registry=None, out=None):
    out = sys.stdout if out is None else out
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "list":
        for name, desc in list_scenarios(registry):
            print(f"{name:18s} {desc}", file=out)
        return lab.EXIT_PASS
    try:
        if args.cmd == "validate":
            info = lab.validate_config(lab.load_config(args.config))
            print(json.dumps(info, indent=2), file=out)
            return lab.EXIT_PASS
        res = lab.run_scenario(lab.load_config(args.config), out_dir=args.out, seed=args.seed,
                               dt=args.dt, n_paths=args.paths)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return lab.EXIT_CONFIG
    except LabError as exc:
        print(f"runtime error [{exc.stage}]: {exc}", file=sys.stderr)
        return lab.EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any crash maps to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return lab.EXIT_RUNTIME
    s = res.summary
    print(f"{s.get('scenario', '?')}: {s['verdict']} (exit {res.exit_code})", file=out)
    if "error" in s:
        print(f"  {s['error']}", file=sys.stderr)
    _print_checks(s, out)
    for kind, path in res.files.items():
        print(f"  wrote {path}", file=out)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
