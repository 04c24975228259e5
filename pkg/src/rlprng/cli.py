"""Command-line entry point: ``rlprng <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from . import harness
from .bitseq import BitImageSpec, read_bitfile, render_image, write_pgm
from .nist import run_battery


def _load(config: str) -> harness.ExperimentConfig:
    if Path(config).is_file():
        return harness.load_config(config)
    if config in harness.PRESETS:
        return harness.PRESETS[config]
    raise FileNotFoundError(f"{config}: no such config file or preset (presets: {', '.join(harness.PRESETS)})")


def _with_seed(cfg: harness.ExperimentConfig, seed: Optional[int]) -> harness.ExperimentConfig:
    return cfg if seed is None else cfg.replace(master_seed=seed)


def cmd_train(args) -> None:
    cfg = _with_seed(_load(args.config), args.seed)
    if args.output is not None:
        cfg = cfg.replace(output_dir=args.output)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = harness.run_experiment(cfg, log=log)
    for v in result.volleys:
        print(f"volley {v.volley}: mean {v.mean_reward:.6f} std {v.std_reward:.6f} over {v.episodes} episodes")
    print(f"wrote {result.output_dir / 'metrics.csv'}")


def cmd_random_baseline(args) -> None:
    cfg = _with_seed(_load(args.config), args.seed)
    out = args.output if args.output is not None else cfg.output_dir
    summary = harness.random_baseline(cfg, args.episodes, out, trace_path=args.trace)
    print(f"random baseline: mean {summary.mean:.6f} std {summary.std:.6f} over {len(summary.rewards)} episodes")


def cmd_evaluate(args) -> None:
    summary = harness.evaluate(args.checkpoint, args.episodes, emit_dir=args.emit_sequences,
                               greedy=args.greedy, seed=args.seed or 0, formulation=args.formulation,
                               trace_path=args.trace)
    for i, score in enumerate(summary.scores):
        where = f"  {summary.files[i]}" if summary.files else ""
        print(f"episode {i}: avg_nist {score:.6f}{where}")
    print(f"mean avg_nist {summary.mean:.6f}")


def cmd_nist_test(args) -> None:
    print(run_battery(read_bitfile(args.bitfile)).format())


def cmd_render_bits(args) -> None:
    seq = read_bitfile(args.bitfile)
    spec = BitImageSpec(rows=args.rows, cols=args.cols, block_px=args.block_px,
                        smoothing=None if args.no_smooth else 3)
    raster = render_image(seq, spec)
    write_pgm(args.output, raster)
    print(f"wrote {args.output} ({raster.shape[1]}x{raster.shape[0]})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlprng", description="Reinforcement-learned bit generators")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a PPO experiment from a config file or preset name")
    t.add_argument("config")
    t.add_argument("--seed", type=int, help="override master_seed")
    t.add_argument("--output", help="override output_dir")
    t.add_argument("-v", "--verbose", action="store_true", help="log each epoch to stderr")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("random-baseline", help="score a uniformly random agent")
    r.add_argument("config")
    r.add_argument("--episodes", type=int, required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--output", help="directory for baseline CSVs (default: output_dir of the config)")
    r.add_argument("--trace", help="write per-step observation/action/reward lines here")
    r.set_defaults(func=cmd_random_baseline)

    e = sub.add_parser("evaluate", help="roll out a checkpointed policy")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--emit-sequences", metavar="DIR")
    e.add_argument("--greedy", action="store_true", help="take the most probable action instead of sampling")
    e.add_argument("--seed", type=int)
    e.add_argument("--formulation", choices=harness.FORMULATIONS, help="fail unless the checkpoint matches")
    e.add_argument("--trace")
    e.set_defaults(func=cmd_evaluate)

    n = sub.add_parser("nist-test", help="run the test battery on a bitfile")
    n.add_argument("bitfile")
    n.set_defaults(func=cmd_nist_test)

    b = sub.add_parser("render-bits", help="render a bitfile as a PGM image")
    b.add_argument("bitfile")
    b.add_argument("-o", "--output", required=True)
    b.add_argument("--rows", type=int, default=40)
    b.add_argument("--cols", type=int, default=25)
    b.add_argument("--block-px", type=int, default=10)
    b.add_argument("--no-smooth", action="store_true")
    b.set_defaults(func=cmd_render_bits)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"rlprng {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
