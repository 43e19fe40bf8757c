"""
Adaptive Partial Scan - command line entry point
Subcommands: synth, train, eval, render.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import RunConfig, get_preset, log_config, parse_config
from core.checkpoint import load_bundle, load_checkpoint, restore_training, save_checkpoint, snapshot_training
from core.crdpg import CheckpointHook, get_trainer
from core.evaluation import evaluate, parse_mode, render_rasters
from core.exceptions import DimensionError, ScanError, UsageError
from core.file_formats import atomic_write, read_learning_curve, write_learning_curve, write_lr_sweep, write_pgm
from core.scan_env import load_dataset, preprocess_dataset, save_dataset, split_dataset, synth_dataset
from models.scan import SplitDataset
from models.training import GEN_OPTIMIZERS, IterationRecord

logger = logging.getLogger("main")

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"


def setup_logging(level: str = "INFO", output_dir: Optional[str] = None) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if output_dir:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(Path(output_dir) / "run.log", encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level.upper())


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "checkpoint", None):
        overrides["checkpoint"] = args.checkpoint
    if getattr(args, "optimizer", None):
        overrides["lr_sweep"] = True
        overrides["gen_optimizer"] = args.optimizer
    return overrides


def _resolve(args: argparse.Namespace) -> RunConfig:
    config = parse_config(args.config, preset=args.preset, overrides=_overrides(args), echo=False)
    setup_logging(config.log_level, config.output_dir)
    log_config(config)
    return config


def load_split(config: RunConfig) -> SplitDataset:
    if config.dataset:
        dataset = load_dataset(config.dataset)
        logger.info("Loaded %d images from %s", dataset.count, config.dataset)
    else:
        dataset = synth_dataset(config.synth_count, config.env.height, config.env.width, config.synth_seed)
        logger.info("Synthesized %d images (seed %d)", dataset.count, config.synth_seed)
    if (dataset.height, dataset.width) != (config.env.height, config.env.width):
        raise DimensionError(
            f"dataset images are {dataset.height}x{dataset.width}, configuration expects "
            f"{config.env.height}x{config.env.width}"
        )
    train, test = split_dataset(dataset, config.train_fraction)
    logger.info("Split: %d train / %d test images", train.count, test.count)
    return SplitDataset(train=train, test=test,
                        train_processed=preprocess_dataset(train), test_processed=preprocess_dataset(test))


def _checkpoint_path(config: RunConfig) -> Path:
    if config.checkpoint:
        return Path(config.checkpoint)
    return Path(config.output_dir) / "checkpoint.asc1"


def cmd_synth(args: argparse.Namespace) -> int:
    setup_logging("INFO")
    preset = get_preset(args.preset or "desk")
    count = preset.synth_count if args.count is None else args.count
    if count < 1:
        raise UsageError(f"synth needs --count >= 1, got {count}")
    seed = preset.synth_seed if args.seed is None else args.seed
    out = args.out or "data/synthetic.wem1"
    dataset = synth_dataset(count, args.height, args.width, seed)
    save_dataset(dataset, out)
    print(f"[Synth] {count} images of {args.height}x{args.width} (seed {seed}) -> {out}")
    return 0


def _checkpoint_writer(output_dir: Path, prior: List[IterationRecord]) -> CheckpointHook:
    def hook(state, records: List[IterationRecord]) -> None:
        snapshot = snapshot_training(state)
        save_checkpoint(snapshot, output_dir / "checkpoints" / f"checkpoint_{state.iteration:08d}.asc1")
        save_checkpoint(snapshot, output_dir / "checkpoint.asc1")
        write_learning_curve(prior + records, output_dir / "learning_curve.csv")
    return hook


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve(args)
    split = load_split(config)
    output_dir = Path(config.output_dir)
    curve_path = output_dir / "learning_curve.csv"

    state, prior = None, []
    if config.checkpoint:
        state = restore_training(load_checkpoint(config.checkpoint), config)
        if curve_path.exists():
            prior = [IterationRecord.from_row(row) for row in read_learning_curve(curve_path)
                     if int(row["iteration"]) <= state.iteration]
        logger.info("Resuming from %s at iteration %d", config.checkpoint, state.iteration)

    trainer = get_trainer(config, split, state=state, checkpoint_hook=_checkpoint_writer(output_dir, prior))
    records = trainer.run()
    write_learning_curve(prior + records, curve_path)
    print(f"[Train] {len(records)} iterations -> {curve_path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _resolve(args)
    split = load_split(config)
    records = get_trainer(config, split).run()
    out = Path(config.output_dir) / f"lr_sweep_{config.train.gen_optimizer}.csv"
    write_lr_sweep(records, out)
    print(f"[Sweep] {len(records)} iterations, lr 10^{config.train.lr_sweep_start:g} to 10^{config.train.lr_sweep_stop:g} -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve(args)
    mode = parse_mode(args.mode)
    split = load_split(config)
    bundle = load_bundle(_checkpoint_path(config), config)
    report = evaluate(bundle.generator, bundle.actor, config.env, split.test_processed,
                      mode=args.mode, limit=config.train.eval_limit)
    out = Path(config.output_dir) / f"eval_{mode.kind}.csv"
    atomic_write(out, report.to_csv().encode("utf-8"))
    print(report.to_csv(), end="")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    config = _resolve(args)
    split = load_split(config)
    bundle = load_bundle(_checkpoint_path(config), config)
    scan, completion, target = render_rasters(bundle.generator, bundle.actor, config.env, split.test_processed,
                                              args.image_index, mode=args.mode)
    out = Path(config.output_dir)
    write_pgm(scan, out / "scan.pgm")
    write_pgm(completion, out / "completion.pgm")
    write_pgm(target, out / "target.pgm")
    print(f"[Render] test image {args.image_index} -> {out}/scan.pgm, completion.pgm, target.pgm")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-scan", description="Adaptive partial scans with CRDPG")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="write a synthetic WEM1 dataset")
    synth.add_argument("--count", type=int, default=None)
    synth.add_argument("--height", type=int, default=96)
    synth.add_argument("--width", type=int, default=96)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--preset", choices=["paper", "desk"], default=None)
    synth.add_argument("--out", default=None, help="output .wem1 file")
    synth.set_defaults(handler=cmd_synth)

    for name, handler, text in (
        ("train", cmd_train, "train actor, critic and generator"),
        ("sweep", cmd_sweep, "generator loss over an exponential learning-rate ramp"),
        ("eval", cmd_eval, "test-set error of a checkpoint"),
        ("render", cmd_render, "render scan, completion and target as PGM"),
    ):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("--config", default=None)
        sub.add_argument("--preset", choices=["paper", "desk"], default=None)
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", default=None, help="output directory")
        if name != "sweep":
            sub.add_argument("--checkpoint", default=None)
        else:
            sub.add_argument("--optimizer", choices=GEN_OPTIMIZERS, default="adam")
        if name in ("eval", "render"):
            sub.add_argument("--mode", default="adaptive", help="adaptive | spiral | waypoints:PATH")
        if name == "render":
            sub.add_argument("--image-index", type=int, default=0)
        sub.set_defaults(handler=handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ScanError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
