"""Command-line entry points.

Stage subcommands execute one pipeline stage for one seed (loading prior
artifacts from the run directory), `run` executes the whole pipeline for
every configured seed, and `report` aggregates finished runs. All
commands are driven by a JSON config file; dotted --set overrides adjust
individual keys, and the KDLAB_SEEDS env var overrides the seed list.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .pipeline import (ExperimentConfig, RunManifest, format_report, report,
                       run, run_seed)

STAGE_COMMANDS = {
    "gen-corpus": "corpus",
    "train-teacher": "teacher",
    "train-student": "student",
    "warmup": "warmup",
    "align": "align",
    "stats": "stats",
    "distill": "distill",
    "eval": "eval",
    "plot": "plot",
}


def _apply_overrides(d: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


def _load_config(args) -> ExperimentConfig:
    with open(args.config) as f:
        d = json.load(f)
    _apply_overrides(d, getattr(args, "set", None))
    if getattr(args, "outdir", None):
        d["outdir"] = args.outdir
    import os

    env = os.environ.get("KDLAB_SEEDS")
    if env:
        d["seeds"] = [int(s) for s in env.replace(",", " ").split()]
    if getattr(args, "seeds", None):
        d["seeds"] = [int(s) for s in args.seeds.replace(",", " ").split()]
    return ExperimentConfig.from_dict(d)


def _add_common(p):
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a (dotted) config key")
    p.add_argument("--outdir", help="override the output directory")
    p.add_argument("--seeds", help="override the seed list, e.g. 0,42,123")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kdlab",
                                     description="desk-scale knowledge-distillation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {STAGE_COMMANDS[name]} stage")
        _add_common(p)
        p.add_argument("--seed", type=int, help="run only this seed")

    p = sub.add_parser("run", help="run the full pipeline for every seed")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="reuse artifacts that already exist")

    p = sub.add_parser("report", help="aggregate finished runs into a table")
    _add_common(p)
    p.add_argument("--out", help="write the comparison CSV here")

    args = parser.parse_args(argv)

    if args.command in STAGE_COMMANDS:
        stage = STAGE_COMMANDS[args.command]
        config = _load_config(args)
        config = ExperimentConfig.from_dict(config.to_dict() | {"stages": [stage]})
        seeds = [args.seed] if args.seed is not None else list(config.seeds)
        for seed in seeds:
            manifest = run_seed(config, seed, resume=True)
            print(f"seed {seed}: {stage} done -> {json.dumps(manifest.stages.get(stage, {}))}")
        return 0

    if args.command == "run":
        config = _load_config(args)
        manifests = run(config, resume=args.resume)
        for m in manifests:
            print(f"seed {m.seed}: {len(m.stages)} stages -> {Path(config.outdir) / f'seed{m.seed}'}")
        return 0

    if args.command == "report":
        config = _load_config(args)
        manifests = [RunManifest.load(Path(config.outdir) / f"seed{s}" / "manifest.json")
                     for s in config.seeds]
        result = report(manifests, out_csv=args.out)
        print(format_report(result))
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
