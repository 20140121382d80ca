"""Command-line entry point: ``riverpath <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .config import ConfigError, defaults_text, load_config
from .pipeline import (EXIT_CONFIG, EXIT_OK, STAGES, StageError, error_exit_code, run_pipeline,
                       run_stage, sync_volumes, write_volumes)
from .synthgen import ScenarioError, generate, mini_rhine, parse_scenario_text, write_dataset

log = logging.getLogger("riverpath")


def _scenario_text(name: str) -> str:
    p = Path(name)
    if p.is_file():
        return p.read_text(encoding="utf-8")
    shipped = resources.files("riverpath") / "data" / p.name
    if shipped.is_file():
        return shipped.read_text(encoding="utf-8")
    raise ConfigError(f"scenario file not found: {name}")


def cmd_synth(args) -> int:
    sc = parse_scenario_text(_scenario_text(args.scenario)) if args.scenario else mini_rhine()
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    paths = write_dataset(generate(sc), args.out)
    print(f"wrote synthetic dataset (seed {sc.seed}) to {args.out}; config: {paths['config']}")
    return EXIT_OK


def _parse_sets(items) -> dict[str, str]:
    over = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = val.strip()
    return over


def _config(args):
    over = _parse_sets(getattr(args, "set", None))
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.out is not None:
        over["output.dir"] = str(Path(args.out).resolve())
    return load_config(args.config, over)


def cmd_sync_direct(args) -> int:
    need = {"--manifest": args.manifest, "--flow-table": args.flow_table, "--sites": args.sites,
            "--path": args.path, "--out": args.out}
    missing = [k for k, v in need.items() if not v]
    if missing:
        raise ConfigError(f"sync without --config needs {', '.join(missing)}")
    try:
        res = sync_volumes(Path(args.manifest), Path(args.flow_table), Path(args.sites),
                           [s.strip() for s in args.path.split(",") if s.strip()],
                           [r.strip() for r in (args.reaches or "").split(",") if r.strip()])
    except Exception as exc:
        raise StageError("sync", exc) from exc
    write_volumes(Path(args.out), res)
    print(f"sync: {len(res.volumes)} volumes written to {args.out}")
    return EXIT_OK


def cmd_stage(args) -> int:
    if args.command == "sync" and args.config is None:
        return cmd_sync_direct(args)
    cfg = _config(args)
    res = run_stage(args.command, cfg)
    print(f"{res.name}: done in {res.seconds:.1f} s")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_pipeline(cfg)
    for st in report["stages"]:
        print(f"{st['stage']:<11} {st['seconds']:8.1f} s")
    print(f"outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.defaults:
        sys.stdout.write(defaults_text())
        return EXIT_OK
    if args.check:
        sys.stdout.write(load_config(args.check).to_text())
        return EXIT_OK
    raise ConfigError("use --defaults or --check FILE")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riverpath", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenario", help="scenario file (key = value); default: built-in mini-rhine")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    helps = {
        "sync": "match samples into synchronized volumes",
        "preprocess": "grid, baseline-correct and align each site group",
        "decompose": "windowed PARAFAC2, standards, per-site concentration blocks",
        "pathmodel": "fit the Process PLS path model",
        "predict": "predict each block from its predecessors; NRMSE table",
        "match": "annotate components against the reference library",
        "report": "figures and run report",
    }

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="overrides output.dir (sync without --config: volumes CSV)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    for name in STAGES:
        p = sub.add_parser(name, help=helps[name])
        common(p, config_required=name != "sync")
        if name == "sync":
            p.add_argument("--manifest", help="standalone mode: sample manifest")
            p.add_argument("--flow-table", help="standalone mode: flow table")
            p.add_argument("--sites", help="standalone mode: site table")
            p.add_argument("--path", help="standalone mode: comma-separated site order")
            p.add_argument("--reaches", help="standalone mode: UP-DOWN reach list")
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("run", help="run all stages in order")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("config", help="print the config schema or a resolved config")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--defaults", action="store_true", help="print every key with its default")
    g.add_argument("--check", metavar="FILE", help="validate FILE and print the resolved values")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"riverpath: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ConfigError, ScenarioError) as exc:
        print(f"riverpath: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"riverpath: error: {exc}", file=sys.stderr)
        return error_exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
