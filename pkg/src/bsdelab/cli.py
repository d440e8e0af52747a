"""Command line entry points: run a spec file, list fixtures, verify.

Exit codes: 0 all checks PASS, 1 a tolerance check FAILED, 2 runtime or
configuration error.  BSDELAB_SEED overrides the seed from the spec file
(and the default seed of `verify` when --seed is not given).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from dataclasses import replace

from .errors import BsdeLabError
from .harness import list_fixtures, load_spec, run
from .verify import DEFAULT_SEED, verify_all


def _env_seed():
    raw = os.environ.get("BSDELAB_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise BsdeLabError(f"BSDELAB_SEED must be an integer, got {raw!r}") from None


def _cmd_run(args) -> int:
    spec = load_spec(args.config)
    env = _env_seed()
    if env is not None:
        spec = replace(spec, seed=env)
    manifest = run(spec)
    print(f"run dir: {manifest.run_dir}")
    print(f"spec hash: {manifest.spec_hash}")
    for check, ok in manifest.results.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {check}")
    return 0 if manifest.passed else 1


def _cmd_fixtures(args) -> int:
    rows = list_fixtures()
    header = f"{'name':<18} {'dims':<6} {'alpha':>6} {'lipschitz':>10} closed-form"
    print(header)
    print("-" * len(header))
    for row in rows:
        dims = f"{row['dim_x']}x{row['dim_w']}"
        print(f"{row['name']:<18} {dims:<6} {row['alpha']:>6.2f} "
              f"{row['lipschitz']:>10.2f} {row['closed_form']}")
    return 0


def _cmd_verify(args) -> int:
    seed = args.seed
    if seed is None:
        seed = _env_seed()
    if seed is None:
        seed = DEFAULT_SEED
    results = verify_all(seed=seed, fixture=args.fixture)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] criterion {r.index}: "
              f"{r.name} - {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed "
          f"(seed {seed})")
    return 0 if not failed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bsdelab",
        description="numerical laboratory for quadratic-growth BSDEs")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute one experiment spec file")
    p_run.add_argument("config", help="path to the TOML spec file")
    p_run.set_defaults(fn=_cmd_run)
    p_fix = sub.add_parser("fixtures", help="list registered fixtures")
    p_fix.set_defaults(fn=_cmd_fixtures)
    p_ver = sub.add_parser("verify", help="run the acceptance criteria")
    p_ver.add_argument("--fixture", default=None,
                       help="only criteria touching this fixture")
    p_ver.add_argument("--seed", type=int, default=None,
                       help=f"seed (default {DEFAULT_SEED}, or BSDELAB_SEED)")
    p_ver.set_defaults(fn=_cmd_verify)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BsdeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
