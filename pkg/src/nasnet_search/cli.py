"""Command-line entry point.

Commands:
  search         run an architecture search into a run directory
  resume         continue an interrupted run directory
  compare        learned controller vs random search at matched budget (CSV)
  compile        shapes and costs of a genome under a macro template
  train-child    micro-train one genome and write its curve as CSV
  sample-genome  write a uniformly random genome
  worker         serve work items on stdin/stdout (multi-process transport)

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default output root is ``$NASNET_SEARCH_OUT`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import genome as G
from .cellgraph import CompileError, assemble_network, compile_report, format_report, parse_macro
from .childtrainer.data import generate_dataset
from .childtrainer.train import train_child
from .config import EVALUATORS, ConfigError, RunConfig, load_config
from .controller import ALGORITHMS
from .searchd import compare_rl_vs_rs, resume, run_search
from .searchd.protocol import run_worker
from .searchd.run import RunCorruptError, SearchAborted

OUT_ENV = "NASNET_SEARCH_OUT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CURVE_COLUMNS = ("epoch", "lr", "droppath", "train_loss", "train_acc")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV) or "runs")


def _fresh_dir(name: str) -> Path:
    """First ``<root>/<name>``, ``<root>/<name>-2``, ... that does not exist yet."""
    root = output_root()
    path, n = root / name, 1
    while path.exists():
        n += 1
        path = root / f"{name}-{n}"
    return path


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    # one key at a time so a rejected value names its own key
    for key in ("evaluator", "budget", "workers", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            cfg = cfg.replace("search", **{key: value})
    if getattr(args, "algorithm", None) is not None:
        cfg = cfg.replace("controller", algorithm=args.algorithm)
    return cfg


def _progress(info: dict) -> None:
    print(
        f"samples {info['samples']}/{info['budget']}  best {info['best']:.4f}  "
        f"baseline {info['baseline']:.4f}  updates {info['updates']}",
        flush=True,
    )


def _summarize(state) -> None:
    lb = state.leaderboard
    print(f"completed {len(state.completed)} evaluations, {state.updates} policy updates, "
          f"{state.worker_deaths} worker failures")
    if lb is not None and len(lb):
        top = lb.entries[0]
        print(f"best reward {top.reward:.4f} (genome id {top.id}, hash {top.genome_hash}); leaderboard size {len(lb)}")
    if state.run_dir is not None:
        print(f"run directory: {state.run_dir}")


def cmd_search(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out) if args.out else _fresh_dir(f"search-{cfg.controller.algorithm}-seed{cfg.search.seed}")
    state = run_search(cfg, out, progress=None if args.quiet else _progress)
    _summarize(state)
    return EXIT_OK


def cmd_resume(args) -> int:
    state = resume(args.run_dir, progress=None if args.quiet else _progress)
    _summarize(state)
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        if "," not in text:
            return list(range(int(text)))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects a count or a comma-separated list, got {text!r}") from None


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    budget = args.budget if args.budget is not None else 600

    def progress(info):
        if not args.quiet:
            print(f"{info['arm']} seed {info['seed']}: best {info['best']:.4f}  top-25 mean {info['top25']:.4f}",
                  flush=True)

    report = compare_rl_vs_rs(budget, seeds, cfg, progress)
    out = Path(args.out) if args.out else _fresh_dir("compare")
    per_seed, agg = report.write(out)
    s = report.summary()
    for arm, vals in s["mean_final"].items():
        print(f"{arm} mean over seeds at {budget} samples: best {vals['best']:.4f}  "
              f"top-5 {vals['top5_mean']:.4f}  top-25 {vals['top25_mean']:.4f}")
    print(f"rl top-25 mean above rs in {s['rl_top25_wins']}/{s['seeds']} seeds; "
          f"rl best not below rs in {s['rl_best_not_worse']}/{s['seeds']} seeds")
    print(f"wrote {per_seed} and {agg}")
    return EXIT_OK


def _load_genome(path: str) -> G.ArchitectureGenome:
    try:
        return G.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read genome file {path}: {exc.strerror}") from None


def cmd_compile(args) -> int:
    arch = _load_genome(args.genome)
    macro = parse_macro(args.macro, template=args.template, num_classes=args.num_classes)
    net = assemble_network(arch, macro, (args.image_size, args.image_size, args.channels))
    report = compile_report(net)
    if args.json:
        print(json.dumps(report, indent=1))
    else:
        print(format_report(report))
    return EXIT_OK


def cmd_train_child(args) -> int:
    cfg = _resolve_config(args)
    arch = _load_genome(args.genome)
    macro = parse_macro(args.macro, num_classes=cfg.dataset.num_classes) if args.macro else cfg.macro
    for key, value in (("epochs", args.epochs), ("droppath", args.droppath),
                       ("learning_rate", args.lr), ("seed", args.seed)):
        if value is not None:
            cfg = cfg.replace("train", **{key: value})
    dataset = generate_dataset(cfg.dataset)

    def log(row):
        if not args.quiet:
            print(f"epoch {row['epoch']}  lr {row['lr']:.5f}  droppath {row['droppath']:.4f}  "
                  f"loss {row['train_loss']:.4f}  acc {row['train_acc']:.4f}", flush=True)

    res = train_child(arch, macro, dataset, cfg.train, log=log)
    curve_path = Path(args.curve) if args.curve else _fresh_dir(f"child-{arch.genome_hash()}-seed{cfg.train.seed}") / "curve.csv"
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    with open(curve_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(res.curve)
    print(json.dumps(res.to_record(), sort_keys=True))
    print(f"reward {res.reward:.6f}{'  diverged' if res.diverged else ''}")
    print(f"curve: {curve_path}")
    return EXIT_OK


def cmd_sample_genome(args) -> int:
    arch = G.sample_uniform(args.blocks, args.seed)
    if args.out:
        G.save(arch, args.out)
    else:
        print(json.dumps(G.to_dict(arch), indent=2))
    return EXIT_OK


def cmd_worker(args) -> int:
    run_worker(sys.stdin.buffer, sys.stdout.buffer)
    return EXIT_OK


def _add_search_flags(p, budget_help="evaluations to run (budget)") -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--evaluator", choices=EVALUATORS)
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--budget", type=int, help=budget_help)
    p.add_argument("--workers", type=int, help="worker pool size; 1 runs serially")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default under ${OUT_ENV} or ./runs)")
    p.add_argument("--quiet", action="store_true", help="no progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nasnet-search", description="Cell-based architecture search engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search")
    _add_search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("resume", help="continue a run directory")
    p.add_argument("run_dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("compare", help="learned controller vs random search")
    _add_search_flags(p, "samples per arm (default 600)")
    p.add_argument("--seeds", default="5", help="seed count N (seeds 0..N-1) or comma-separated list")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("compile", help="report shapes and costs of a genome")
    p.add_argument("genome", help="genome JSON file")
    p.add_argument("--macro", default="2 @ 32", help='"N @ F": cell repeats and penultimate filters')
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--template", choices=("cifar", "imagenet"), default="cifar")
    p.add_argument("--json", action="store_true", help="full per-node report as JSON")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("train-child", help="micro-train one genome")
    p.add_argument("genome", help="genome JSON file")
    p.add_argument("--config", help="INI run configuration ([train], [dataset], [macro] are used)")
    p.add_argument("--macro", help='"N @ F" (default from config)')
    p.add_argument("--epochs", type=int)
    p.add_argument("--droppath", type=float, help="final drop-path probability")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--curve", help="curve CSV path (default under the output root)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_child)

    p = sub.add_parser("sample-genome", help="write a uniformly random genome")
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_genome)

    p = sub.add_parser("worker", help="serve work on stdin/stdout")
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with 2
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"error: configuration: {exc}{key}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, CompileError, G.GenomeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunCorruptError, SearchAborted, FileExistsError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
