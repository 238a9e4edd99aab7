import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from experiment_presets import generate_experiment_config, get_all_presets
from lab import __version__
from lab.contrastive_heatmap import run_heatmap_bench
from lab.errors import LabError
from lab.harness import build_config, compare_modes, load_config, report, run_experiment
from lab.taskgen import run_gen_tasks

logger = logging.getLogger("lab")


def gen_tasks_command(args: argparse.Namespace) -> int:
    """Build multiple-choice samples from annotation records"""
    samples = run_gen_tasks(
        Path(args.out),
        seed=args.seed,
        records_path=Path(args.records) if args.records else None,
        knowledge_dir=Path(args.knowledge_dir) if args.knowledge_dir else None,
        n_synthetic=args.n_synthetic,
    )
    print(f"{len(samples)} samples written to {args.out}")
    return 0


def train_command(args: argparse.Namespace) -> int:
    """Run one experiment, or every mode over several seeds"""
    if args.config:
        config = load_config(Path(args.config))
        overrides = {"seed": args.seed, "out_dir": args.out_dir, "mode": args.mode, "steps": args.steps}
        config = build_config({**config.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})
    else:
        config = build_config(generate_experiment_config(
            args.preset, seed=args.seed, out_dir=args.out_dir, mode=args.mode, steps=args.steps
        ))

    if args.seeds:
        summary = compare_modes(config, args.seeds)
        for mode, entry in summary.items():
            print(mode, " ".join(f"{k}={v:.4f}" for k, v in entry.items()))
        return 0

    result = run_experiment(config)
    final = result.final
    print(f"{config.mode.value}: accuracy {final.accuracy:.4f}, format {final.format_rate:.4f}, "
          f"outputs in {result.out_dir}")
    return 0


def report_command(args: argparse.Namespace) -> int:
    """Plot learning curves and summarize one or more metrics files"""
    summary = report([Path(p) for p in args.metrics], Path(args.out_dir or "report"))
    print(summary, end="")
    return 0


def heatmap_bench_command(args: argparse.Namespace) -> int:
    """Planted-defect benchmark of the contrastive heatmap"""
    result = run_heatmap_bench(Path(args.out_dir or "heatmap_bench"), seed=args.seed or 0,
                               n_fixtures=args.fixtures, k=args.radius)
    print(f"hit rate {result.hit_rate:.3f} over {len(result.rows)} fixtures, "
          f"embeddings {result.embedding_shape[0]}x{result.embedding_shape[1]}")
    return 0


COMMANDS = {
    "gen-tasks": gen_tasks_command,
    "train": train_command,
    "report": report_command,
    "heatmap-bench": heatmap_bench_command,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lab",
        description="Difficulty-aware GRPO laboratory for anomaly-detection style multiple-choice tasks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-tasks", help=gen_tasks_command.__doc__)
    gen.add_argument("--out", default="samples.jsonl")
    gen.add_argument("--records", help="annotation records (JSON Lines); synthetic records when omitted")
    gen.add_argument("--knowledge-dir", help="directory with one <object_type>.txt per object")
    gen.add_argument("--n-synthetic", type=int, default=200)
    gen.add_argument("--seed", type=int, default=0)

    train = sub.add_parser("train", help=train_command.__doc__)
    train.add_argument("--config", help="experiment config (JSON)")
    train.add_argument("--preset", default="direction", choices=sorted(get_all_presets()))
    train.add_argument("--mode", choices=["sft", "grpo_plain", "grpo_difficulty_aware"])
    train.add_argument("--seed", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--out-dir")
    train.add_argument("--seeds", type=int, nargs="+", help="run every mode once per seed and compare")

    rep = sub.add_parser("report", help=report_command.__doc__)
    rep.add_argument("metrics", nargs="+", help="metrics.csv files; the first is the comparison base")
    rep.add_argument("--out-dir")

    bench = sub.add_parser("heatmap-bench", help=heatmap_bench_command.__doc__)
    bench.add_argument("--fixtures", type=int, default=100)
    bench.add_argument("--radius", type=int, default=1)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out-dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    try:
        return COMMANDS[args.command](args)
    except LabError as e:
        logger.error("%s failed: %s", args.command, e.detail)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
