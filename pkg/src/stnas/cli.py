"""Command line front end.

    stnas [--config FILE] [--seed N] [--out DIR] [--precision {32,64}] COMMAND

Commands: run, warmup, search, derive, retrain, gradcheck, bench-memory,
ablate-warmup, report.  Exit codes: 0 ok, 1 check failure, 2 config error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import autodiff as ad
from . import io
from .autodiff import NumericError
from .checks import SCOPES, run_suite
from .config import ConfigError, ExperimentConfig, load_config, planted_context_config
from .metrics import account_memory, large_vocab_c2_bytes
from .pipeline import Workspace, ablation_text, run_pipeline, run_stage, warmup_ablation
from .supernet import SuperNetwork, count_subgraphs

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stnas", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="JSON experiment config (default: planted-context toy run)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs/default", help="artifact directory")
    p.add_argument("--precision", type=int, choices=(32, 64), help="override float width")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", help="warmup, search, derive and retrain")
    for name in ("warmup", "search", "derive", "retrain"):
        sub.add_parser(name, help=f"run only the {name} stage (resumes from --out)")
    g = sub.add_parser("gradcheck", help="finite-difference and enumeration oracles")
    g.add_argument("--scope", default="all", choices=SCOPES)
    b = sub.add_parser("bench-memory", help="peak stored activations per estimator")
    b.add_argument("--batch", type=int)
    b.add_argument("--frames", type=int)
    a = sub.add_parser("ablate-warmup", help="search+retrain with zero vs converged warm-up")
    a.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    sub.add_parser("report", help="print the artifacts found under --out")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else planted_context_config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    return cfg.replace(**overrides) if overrides else cfg


def _gradcheck(args) -> int:
    with ad.precision(64):
        results = run_suite(args.scope, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def _bench_memory(cfg: ExperimentConfig, args) -> int:
    batch = args.batch or cfg.memory.get("batch", 8)
    frames = args.frames or cfg.memory.get("frames", 60)
    with ad.precision(cfg.precision):
        net = SuperNetwork(cfg.net_spec())
        model = account_memory(net, batch=batch, T=frames, seed=cfg.seed)
    single = model.peaks["single"]
    print(f"K={model.K} sub-graphs={count_subgraphs(net)} batch={batch} frames={frames}")
    for name, peak in model.peaks.items():
        print(f"{name:>9}: {peak:>12d} bytes  ({peak / single:.3f} x single)")
    print(f"C1={model.c1} C2={model.c2:.0f} C1+(K-1)C2={model.st_bound:.0f}")
    print(f"large-vocabulary C2 per device: {large_vocab_c2_bytes() / 1e6:.1f} MB")
    ws = Workspace(args.out).ensure()
    ws.write_json("memory.json", model.to_dict())
    return EXIT_OK


def _ablate(cfg: ExperimentConfig, args) -> int:
    start = cfg.seed
    report = warmup_ablation(cfg, seeds=range(start, start + args.seeds))
    ws = Workspace(args.out).ensure()
    ws.write_json("ablation.json", report)
    text = ablation_text(report)
    ws.write_text("ablation.txt", text)
    print(text, end="")
    return EXIT_OK


def _report(args) -> int:
    root = Path(args.out)
    found = False
    for name in ("architecture.txt", "summary.json", "memory.json", "ablation.txt"):
        f = root / name
        if f.exists():
            found = True
            print(f"== {name}")
            print(f.read_text(), end="")
    metrics = root / "metrics.jsonl"
    if metrics.exists():
        recs = [json.loads(line) for line in metrics.read_text().splitlines() if line]
        for stage in ("warmup", "search", "retrain"):
            rs = [r for r in recs if r["stage"] == stage]
            if rs:
                print(f"== {stage}: {len(rs)} epochs, last val_loss {rs[-1]['val_loss']:.5f}")
    if not found:
        print(f"no artifacts under {root}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return _gradcheck(args)
        if args.command == "report":
            return _report(args)
        cfg = resolve_config(args)
        if args.command == "run":
            summary = run_pipeline(cfg, args.out)
            print(Path(args.out, "architecture.txt").read_text(), end="")
            print(json.dumps(summary["test"], sort_keys=True))
        elif args.command in ("warmup", "search", "derive", "retrain"):
            run_stage(args.command, cfg, args.out)
            print(f"{args.command} done -> {args.out}")
        elif args.command == "bench-memory":
            return _bench_memory(cfg, args)
        elif args.command == "ablate-warmup":
            return _ablate(cfg, args)
        return EXIT_OK
    except (ConfigError, io.FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
