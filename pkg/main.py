import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from src.config.run_config import RunConfig, load_run_config, load_synth_config, parse_config
from src.core.services.checkpoint import load_checkpoint, save_checkpoint
from src.core.services.evaluation import VARIANTS, load_split_scenes, run_eval
from src.core.services.model import EquiDiffModel
from src.core.services.property_suite import print_results, run_property_suite
from src.core.services.sampler import render_trace_svg, sample_scene, write_samples, write_trace
from src.core.services.trainer import Trainer
from src.processing.scene_builder import build_inference_scene, default_ego
from src.processing.synthetic import corpus_maneuvers, corpus_trajectories, episode_frames, generate_episodes, split
from src.processing.trajectory_loader import (downsample_corpus, load_trajectories, write_maneuvers,
                                              write_trajectories)
from src.utils.errors import EquiDiffError, InputError, PropertyCheckError
from src.utils.logging import logger

TRAIN_FRACTION = 0.75


def cmd_gen_data(args) -> None:
    """Generate a synthetic corpus and write its train/test split."""
    synth = load_synth_config(args.config)
    run = load_run_config(args.run_config)
    episodes = generate_episodes(synth, args.seed, episode_frames(run))
    train, test = split(episodes, TRAIN_FRACTION, args.seed, key=lambda e: e.maneuver)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories(corpus_trajectories(train), out / "train.csv")
    write_trajectories(corpus_trajectories(test), out / "test.csv")
    write_maneuvers(corpus_maneuvers(episodes), out / "maneuvers.csv")
    logger.info(f"Wrote {len(train)} training and {len(test)} test episodes to {out}")


def cmd_train(args) -> None:
    config = load_run_config(args.config)
    scenes = load_split_scenes(args.data, config, feet=args.feet, split_name="train")
    model = EquiDiffModel.initialize(config, args.seed)
    result = Trainer(model, scenes, seed=args.seed).train(loss_log=args.loss_log or f"{args.out}.loss.csv")
    save_checkpoint(model, args.out)
    if config.train_steps:
        logger.info(f"Probe loss {result.probe_initial:.4f} -> {result.probe_final:.4f}")


def _inference_scene(args, config: RunConfig):
    trajs = downsample_corpus(load_trajectories(args.scene, feet=args.feet), config.downsample_factor)
    ego = args.ego if args.ego is not None else default_ego(trajs, config.history_frames)
    return build_inference_scene(trajs, ego, config.history_frames, config.radius_m)


def cmd_sample(args) -> None:
    model = load_checkpoint(args.ckpt)
    scene = _inference_scene(args, model.config)
    write_samples(sample_scene(model, scene, args.n, args.seed), args.out)


def cmd_trace(args) -> None:
    model = load_checkpoint(args.ckpt)
    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"--steps must be comma-separated integers, got {args.steps!r}")
    scene = _inference_scene(args, model.config)
    samples = sample_scene(model, scene, args.n, args.seed, record=steps)
    write_trace(samples.trace, steps, args.out)
    if args.svg:
        render_trace_svg(samples.trace, steps, args.svg)


def cmd_eval(args) -> None:
    model = load_checkpoint(args.ckpt) if args.ckpt else None
    run = model.config if model else load_run_config(args.config)
    maneuver = [m.strip() for m in args.maneuver.split(",")] if args.maneuver else None
    scenes = load_split_scenes(args.data, run, feet=args.feet, maneuver=maneuver)
    report = run_eval(args.variant, model, scenes, n=args.n, seed=args.seed, best_of=args.best_of,
                      run=run, maneuver=args.maneuver)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(report.to_text())


def cmd_check(args) -> None:
    config = load_run_config(args.config)
    if args.variant:
        config = parse_config(RunConfig, dict(config.model_dump(), variant=args.variant), "--variant")
    results = run_property_suite(config, seed=args.seed, rotations=args.rotations, inputs=args.inputs)
    print_results(results)
    failed = [r for r in results if not r.passed]
    if failed:
        raise PropertyCheckError(f"{len(failed)} of {len(results)} properties failed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equidiff", description="Equivariant diffusion trajectory prediction")
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    gen = subparsers.add_parser("gen-data", help="Generate a synthetic train/test corpus")
    gen.add_argument("--config", help="Synthetic corpus YAML (defaults when omitted)")
    gen.add_argument("--run-config", help="Run YAML providing window lengths and downsampling")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    train = subparsers.add_parser("train", help="Train a model and write a checkpoint")
    train.add_argument("--config", help="Run YAML (defaults when omitted)")
    train.add_argument("--data", required=True, help="Corpus directory or trajectory CSV")
    train.add_argument("--out", required=True, help="Checkpoint path")
    train.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    train.add_argument("--loss-log", help="Loss CSV path (default: <out>.loss.csv)")
    train.add_argument("--feet", action="store_true", help="Input coordinates are in feet")
    train.set_defaults(func=cmd_train)

    for name, helptext in (("sample", "Draw future trajectories for one scene"),
                           ("trace", "Record intermediate sampling states")):
        p = subparsers.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--scene", required=True, help="Trajectory CSV holding the ego and its neighbors")
        p.add_argument("--ego", type=int, default=None, help="Ego vehicle id (default: smallest with a full history)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--feet", action="store_true", help="Input coordinates are in feet")
    sample = subparsers.choices["sample"]
    sample.add_argument("--n", type=int, default=1, help="Number of samples")
    sample.set_defaults(func=cmd_sample)
    trace = subparsers.choices["trace"]
    trace.add_argument("--n", type=int, default=50, help="Number of samples")
    trace.add_argument("--steps", default="200,150,100,50,0", help="Comma-separated diffusion steps to record")
    trace.add_argument("--svg", help="Directory for one scatter plot per recorded step")
    trace.set_defaults(func=cmd_trace)

    ev = subparsers.add_parser("eval", help="Score a model or the constant-velocity baseline")
    ev.add_argument("--ckpt", help="Checkpoint (not needed for --variant cv)")
    ev.add_argument("--config", help="Run YAML for --variant cv")
    ev.add_argument("--data", required=True, help="Corpus directory (uses test.csv) or trajectory CSV")
    ev.add_argument("--variant", choices=VARIANTS, default="full")
    ev.add_argument("--out", required=True, help="Report JSON path")
    ev.add_argument("--n", type=int, default=1, help="Samples per scene")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--maneuver", help="Comma-separated maneuver classes to keep")
    ev.add_argument("--best-of", action="store_true", help="Score the best of the n samples")
    ev.add_argument("--feet", action="store_true", help="Input coordinates are in feet")
    ev.set_defaults(func=cmd_eval)

    check = subparsers.add_parser("check", help="Run the structural property suite")
    check.add_argument("--config", help="Run YAML (defaults when omitted)")
    check.add_argument("--variant", choices=VARIANTS[:3])
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--rotations", type=int, default=None)
    check.add_argument("--inputs", type=int, default=None)
    check.set_defaults(func=cmd_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        args.func(args)
        return 0
    except EquiDiffError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}")
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
