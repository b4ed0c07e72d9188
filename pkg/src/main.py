from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional, Tuple

from .checkpoint import load_checkpoint
from .dataset import build_manifest
from .errors import ConfigError, FusionError, TrainingDivergedError
from .images import load_pair, save_image
from .log import get_logger, setup_logging
from .run_config import load_config
from .synth import SynthSpec, write_dataset
from .trainer import evaluate, fuse_pair, train

log = get_logger("main")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> Tuple[int, int]:
    """Parse 'HxW', e.g. '64x80'."""
    try:
        h, w = (int(v) for v in text.lower().split("x", 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text!r}")
    return v


def cmd_synth(out: str, count: int, seed: int, size: Optional[Tuple[int, int]], targets: Optional[int]) -> int:
    spec = SynthSpec(seed=seed)
    if size is not None:
        spec = replace(spec, height=size[0], width=size[1])
    if targets is not None:
        spec = replace(spec, n_targets=targets)
    manifest = write_dataset(spec, out, count)
    log.info("Dataset ready: %d pair(s) in %s", len(manifest), out)
    return EXIT_OK


def cmd_train(
    config_path: str,
    data: str,
    out: str,
    resume: Optional[str] = None,
    split: Optional[str] = None,
    max_steps: Optional[int] = None,
    usage: str = "",
) -> int:
    """Train from a config file; prints the last step's loss breakdown. A bad config file is a usage error."""
    try:
        config = load_config(config_path)
    except ConfigError as e:
        sys.stderr.write(usage)
        log.error("--config: %s", e)
        return EXIT_USAGE
    manifest = build_manifest(data, split=split)
    ckpt = load_checkpoint(resume) if resume else None
    result = train(config, manifest, resume=ckpt, max_steps=max_steps, out_dir=out)
    log.info("Final checkpoint: %s, loss log: %s", result.checkpoint_path, result.log_path)
    last = result.last
    if last is None:
        print("no training steps were run")
    else:
        print(
            f"step={last.step} mse={last.mse!r} grad={last.grad!r} entropy={last.entropy!r} "
            f"roi={last.roi!r} total={last.total!r}"
        )
    return EXIT_OK


def _fuse(ckpt_path: str, ir: str, vis: str, size: Optional[Tuple[int, int]]):
    ckpt = load_checkpoint(ckpt_path)
    pair_id = os.path.splitext(os.path.basename(ir))[0]
    pair = load_pair(pair_id, ir, vis, size)
    return fuse_pair(ckpt, pair)


def cmd_fuse(ckpt: str, ir: str, vis: str, out: str, alpha: Optional[str] = None, size: Optional[Tuple[int, int]] = None) -> int:
    """Write the fused grayscale PNG and, with `alpha`, the alpha map (brighter = more IR)."""
    fused, alpha_map = _fuse(ckpt, ir, vis, size)
    save_image(fused, out)
    log.info("Fused image written to %s", out)
    if alpha:
        save_image(alpha_map, alpha)
        log.info("Alpha map written to %s", alpha)
    return EXIT_OK


def cmd_export_alpha(ckpt: str, ir: str, vis: str, out: str, size: Optional[Tuple[int, int]] = None) -> int:
    _, alpha_map = _fuse(ckpt, ir, vis, size)
    save_image(alpha_map, out)
    log.info("Alpha map written to %s", out)
    return EXIT_OK


def cmd_eval(
    ckpt_path: str,
    data: str,
    out: str,
    split: Optional[str] = None,
    size: Optional[Tuple[int, int]] = None,
    alpha_override: Optional[float] = None,
) -> int:
    """Write per-pair metrics plus a mean row to `out` and print the mean row."""
    ckpt = load_checkpoint(ckpt_path)
    manifest = build_manifest(data, split=split)
    report = evaluate(ckpt, manifest, alpha_override=alpha_override, size=size)
    report.write_csv(out)
    print(report.mean_line())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionnet", description="Infrared/visible image fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    # synth
    p_synth = sub.add_parser("synth", help="Write a synthetic IR/VIS dataset with ROI boxes")
    p_synth.add_argument("--out", required=True, help="Dataset root to create (gets ir/, vis/, ann/)")
    p_synth.add_argument("--count", type=int, required=True, help="Number of pairs")
    p_synth.add_argument("--seed", type=int, default=42, help="Seed of the first pair (pair i uses seed+i)")
    p_synth.add_argument("--size", type=_size, default=None, help="Image size HxW (default: 64x64)")
    p_synth.add_argument("--targets", type=int, default=None, help="Hot targets per pair (default: 3)")

    # train
    p_train = sub.add_parser("train", help="Train FusionNet")
    p_train.add_argument("--config", required=True, help="key=value config file (TrainConfig field names)")
    p_train.add_argument("--data", required=True, help="Dataset root with ir/, vis/ and optional ann/")
    p_train.add_argument("--out", required=True, help="Directory for checkpoints and the loss log")
    p_train.add_argument("--resume", default=None, help="Checkpoint to continue from")
    p_train.add_argument("--split", default=None, help="File listing the ids to use, one per line")
    p_train.add_argument("--max-steps", type=int, default=None, help="Stop after this many global steps")
    p_train.set_defaults(usage=p_train.format_usage())

    # fuse
    p_fuse = sub.add_parser("fuse", help="Fuse one IR/VIS pair")
    p_fuse.add_argument("--ckpt", required=True, help="Checkpoint file")
    p_fuse.add_argument("--ir", required=True, help="Infrared PNG")
    p_fuse.add_argument("--vis", required=True, help="Visible PNG")
    p_fuse.add_argument("--out", required=True, help="Fused grayscale PNG to write")
    p_fuse.add_argument("--alpha", default=None, help="Also write the alpha map here")
    p_fuse.add_argument("--size", type=_size, default=None, help="Resize both inputs to HxW first")

    # export-alpha
    p_alpha = sub.add_parser("export-alpha", help="Write the alpha map of one pair (brighter = more IR)")
    p_alpha.add_argument("--ckpt", required=True, help="Checkpoint file")
    p_alpha.add_argument("--ir", required=True, help="Infrared PNG")
    p_alpha.add_argument("--vis", required=True, help="Visible PNG")
    p_alpha.add_argument("--out", required=True, help="Alpha PNG to write")
    p_alpha.add_argument("--size", type=_size, default=None, help="Resize both inputs to HxW first")

    # eval
    p_eval = sub.add_parser("eval", help="Compute SSIM, MSE, entropy and ROI-SSIM over a dataset")
    p_eval.add_argument("--ckpt", required=True, help="Checkpoint file")
    p_eval.add_argument("--data", required=True, help="Dataset root")
    p_eval.add_argument("--out", required=True, help="CSV report to write")
    p_eval.add_argument("--split", default=None, help="File listing the ids to use, one per line")
    p_eval.add_argument("--size", type=_size, default=None, help="Resize pairs to HxW before fusing")
    p_eval.add_argument(
        "--alpha-override",
        type=_unit,
        default=None,
        help="Replace the learned alpha map with this constant (debugging)",
    )

    return p


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "synth":
        return cmd_synth(args.out, args.count, args.seed, args.size, args.targets)
    elif args.command == "train":
        return cmd_train(args.config, args.data, args.out, args.resume, args.split, args.max_steps, args.usage)
    elif args.command == "fuse":
        return cmd_fuse(args.ckpt, args.ir, args.vis, args.out, args.alpha, args.size)
    elif args.command == "export-alpha":
        return cmd_export_alpha(args.ckpt, args.ir, args.vis, args.out, args.size)
    elif args.command == "eval":
        return cmd_eval(args.ckpt, args.data, args.out, args.split, args.size, args.alpha_override)
    raise SystemExit(EXIT_USAGE)


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return _dispatch(args)
    except TrainingDivergedError as e:
        log.error("Training aborted at step %d: %s", e.step, e.reason)
        return EXIT_RUNTIME
    except (FusionError, OSError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
