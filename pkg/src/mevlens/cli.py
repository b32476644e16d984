"""``lens`` command line.

Settings are resolved as defaults < config file < flags. The config file is a
flat key = value TOML file named by ``--config`` or the ``LENS_CONFIG``
environment variable; its keys are the :class:`RunConfig` field names.

Exit status: 0 success, 1 input error, 2 invariant violation (for ``verify``:
output disagrees with planted truth).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import fixtures
from .ingest import InputError, InvariantViolation
from .pipeline import STAGES, RunConfig, run

try:  # python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

CONFIG_ENV = "LENS_CONFIG"
EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2

INPUT_FILES = {"blocks": "blocks.jsonl", "mempool": "mempool.csv", "registries": "registries",
               "bids": "bids.csv", "payloads": "payloads.csv"}


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"config {path}: {exc}") from exc
    known = set(RunConfig.field_names())
    bad = sorted(k for k in data if k not in known or isinstance(data[k], dict))
    if bad:
        raise InputError(f"config {path}: unknown or nested key(s) {', '.join(bad)}")
    return data


def _inputs_from_dir(d) -> dict:
    d = Path(d)
    if not d.is_dir():
        raise InputError(f"input directory not found: {d}")
    return {k: str(d / name) for k, name in INPUT_FILES.items() if (d / name).exists()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    cfg_path = args.config or os.environ.get(CONFIG_ENV)
    if cfg_path:
        values.update(load_config_file(cfg_path))
    if args.input_dir:
        values.update(_inputs_from_dir(args.input_dir))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    types = {f.name: f.type for f in fields(RunConfig)}
    for k, v in list(values.items()):
        t = types[k]
        try:
            if t == "int":
                if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                    raise ValueError
                values[k] = int(v)
            elif t == "float":
                values[k] = float(v)
            elif v is not None:
                values[k] = str(v)
        except (TypeError, ValueError):
            raise InputError(f"config value {k}={v!r} is not a valid {t}") from None
    return RunConfig(**values)


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"flat key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--input-dir", help="directory holding blocks.jsonl, mempool.csv, registries/, bids.csv, payloads.csv")
    p.add_argument("--blocks")
    p.add_argument("--mempool")
    p.add_argument("--registries", help="directory of registry_<kind>.csv files")
    p.add_argument("--bids")
    p.add_argument("--payloads")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--dust-wei", dest="dust_wei", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--min-market-share", dest="min_market_share", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--genesis-time", dest="genesis_time", type=int)
    p.add_argument("--cancel-mode", dest="cancel_mode")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lens", description="Block-builder competition measurement pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _run_args(sub.add_parser(stage, help=f"run the {stage} stage"))
    _run_args(sub.add_parser("run-all", help="run every stage (bids only when a bid file is given)"))

    g = sub.add_parser("gen-fixture", help="write a synthetic corpus with planted ground truth")
    g.add_argument("--scenario", help="flat key=value scenario file")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-blocks", dest="n_blocks", type=int)
    g.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="compare pipeline outputs with a fixture's ground truth")
    v.add_argument("--fixture", required=True, help="directory written by gen-fixture")
    v.add_argument("--out-dir", dest="out_dir", required=True)
    v.add_argument("--report", help="write the full JSON report here")
    v.add_argument("--tolerance", type=float, default=0.01)
    return ap


def _cmd_run(args) -> int:
    cfg = resolve_config(args)
    if args.command == "run-all":
        stages = [s for s in STAGES if s != "bids" or cfg.bids]
    else:
        stages = [args.command]
    summary = run(cfg, stages)
    brief = {"stages": summary["stages"], "out_dir": cfg.out_dir, "config_hash": summary["config_hash"]}
    print(json.dumps(brief, sort_keys=True))
    return EXIT_OK


def _cmd_gen(args) -> int:
    spec = fixtures.ScenarioSpec.load(args.scenario) if args.scenario else fixtures.ScenarioSpec()
    over = {k: getattr(args, k) for k in ("seed", "n_blocks") if getattr(args, k) is not None}
    if over:
        spec = fixtures.ScenarioSpec.from_mapping({**_spec_mapping(spec), **over})
    paths = fixtures.generate(spec, args.out)
    print(json.dumps({k: str(v) for k, v in sorted(paths.items())}, sort_keys=True))
    return EXIT_OK


def _spec_mapping(spec) -> dict:
    return tomllib.loads(spec.to_toml())


def _cmd_verify(args) -> int:
    for d in (args.fixture, args.out_dir):
        if not Path(d).is_dir():
            raise InputError(f"directory not found: {d}")
    if not (Path(args.fixture) / "truth_labels.csv").exists():
        raise InputError(f"{args.fixture} has no ground truth (truth_labels.csv)")
    report = fixtures.verify(args.fixture, args.out_dir, args.tolerance)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, chk in sorted(report["checks"].items()):
        ok = chk.get("match", chk.get("mismatches", 0) == 0)
        print(f"{name}: {'ok' if ok else 'MISMATCH'}")
        for ex in chk.get("examples", [])[:5]:
            print(f"  {json.dumps(ex, sort_keys=True)}")
    for name, st in sorted(report.get("statistics", {}).items()):
        print(f"{name} (statistical): {'match' if st['match'] else 'differs'} "
              f"expected={st['expected']} got={st['got']}")
    print("verify: " + ("ok" if report["ok"] else "FAILED"))
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-fixture":
            return _cmd_gen(args)
        if args.command == "verify":
            return _cmd_verify(args)
        return _cmd_run(args)
    except InvariantViolation as exc:
        print(f"lens: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except InputError as exc:
        print(f"lens: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
