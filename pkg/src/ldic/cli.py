"""Command-line interface.

Subcommands: synth (write a synthetic RGB-D dataset), train, compress,
decompress, and eval (the four-scenario rate sweep with Bjontegaard deltas).

Exit codes: 0 success, 1 usage error, 2 unreadable or malformed data,
3 unexpected internal failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .bitstream import BitstreamError, parse
from .codec import CodecError, ImageCodec
from .config import MODEL_PRESETS, ConfigError, TrainConfig
from .data import (
    DataError,
    load_depth,
    load_manifest,
    load_pair,
    load_rgb,
    save_rgb,
    synth_dataset,
    upsample_depth,
)
from .evaluation import DEFAULT_M_GRID, SCENARIOS, psnr
from .experiment import ExperimentConfig, TrainedExperiment, evaluate_scenarios
from .model import CheckpointError, load_checkpoint
from .training import Trainer

log = logging.getLogger(__name__)

CHECKPOINT_ENV = "LDIC_CHECKPOINT"


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        sys.exit(1 if status else 0)


def _checkpoint_arg(args) -> str:
    ckpt = args.checkpoint or os.environ.get(CHECKPOINT_ENV)
    if not ckpt:
        raise ConfigError(
            f"pass --checkpoint or set the {CHECKPOINT_ENV} environment variable"
        )
    return ckpt


def _load_codec(path: str) -> ImageCodec:
    return ImageCodec.from_checkpoint(load_checkpoint(path))


def _parse_grid(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse rate grid {text!r}") from None
    if len(grid) < 2 or any(not 0.0 <= m <= 1.0 for m in grid):
        raise ConfigError("the rate grid needs at least two values in [0, 1]")
    return grid


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    ids = synth_dataset(
        args.out,
        args.split,
        args.count,
        size=args.size,
        informativeness=args.informativeness,
        seed=args.seed,
    )
    print(f"wrote {len(ids)} pairs to {Path(args.out) / args.split}")
    return 0


def cmd_train(args) -> int:
    model_cfg = MODEL_PRESETS[args.preset](depth_guided=not args.baseline)
    train_cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        crop_size=args.crop_size,
        lr=args.lr,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        log_every=args.log_every,
        lr_decay_step=args.lr_decay_step,
    )
    manifest = load_manifest(args.data, args.split)
    if not manifest.entries:
        raise DataError(f"no usable pairs under {args.data}/{args.split}")
    pairs = [load_pair(e) for e in manifest.entries]
    final = Trainer(model_cfg, train_cfg, pairs, args.out).run()
    print(final)
    return 0


def cmd_compress(args) -> int:
    codec = _load_codec(_checkpoint_arg(args))
    image = load_rgb(args.input)
    depth = None
    embed = None
    if args.embed_depth:
        if not args.depth:
            raise CodecError("--embed-depth needs --depth")
        embed = load_depth(args.depth)
    elif args.depth:
        depth = upsample_depth(
            load_depth(args.depth), (image.height, image.width)
        )
    res = codec.encode_image(image, args.mlambda, depth, embed_depth=embed)
    Path(args.output).write_bytes(res.data)
    print(
        f"bpp={res.bpp:.4f} psnr_db={psnr(image, res.recon):.2f} "
        f"bytes={len(res.data)}",
        file=sys.stderr,
    )
    return 0


def cmd_decompress(args) -> int:
    codec = _load_codec(_checkpoint_arg(args))
    container = parse(Path(args.input).read_bytes())
    depth = None
    if args.depth:
        depth = upsample_depth(
            load_depth(args.depth), (container.height, container.width)
        )
    out = codec.decode_image(container, depth)
    save_rgb(args.output, out.recon)
    print(f"m_lambda={out.m_lambda:.4f}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data, args.split)
    if not manifest.entries:
        raise DataError(f"no usable pairs under {args.data}/{args.split}")
    pairs = tuple(load_pair(e) for e in manifest.entries)
    scenarios = tuple(args.scenario) if args.scenario else SCENARIOS
    trained = TrainedExperiment(
        config=ExperimentConfig(m_grid=_parse_grid(args.grid)),
        root=Path(args.out),
        guided_ckpt=Path(args.checkpoint),
        baseline_ckpt=Path(args.baseline),
        test_pairs=pairs,
    )
    report = evaluate_scenarios(
        trained, args.out, jobs=args.jobs, scenarios=scenarios
    )
    for name in scenarios:
        if name == "no_lidar":
            continue
        print(
            f"{name}: bd_rate={report.bd_rate_vs_baseline[name]:+.2f}% "
            f"bd_psnr={report.bd_psnr_vs_baseline[name]:+.3f}dB"
        )
    print(f"compressed_depth_share={report.depth_share:.4f}")
    print(f"report written to {report.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="ldic", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic RGB-D dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--informativeness", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on an RGB-D dataset")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="run directory for checkpoints")
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="toy")
    p.add_argument(
        "--baseline",
        action="store_true",
        help="train without depth guidance",
    )
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--crop-size", type=int, default=TrainConfig.crop_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--lr-decay-step", type=int, default=TrainConfig.lr_decay_step)
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument(
        "--checkpoint-every", type=int, default=TrainConfig.checkpoint_every
    )
    p.add_argument("--log-every", type=int, default=TrainConfig.log_every)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="encode one image to a stream")
    p.add_argument("--checkpoint", help=f"model file (or ${CHECKPOINT_ENV})")
    p.add_argument("--input", required=True, help="RGB PNG to encode")
    p.add_argument("--depth", help="16-bit depth PNG to condition on")
    p.add_argument("--mlambda", type=float, default=0.5, help="rate control in [0, 1]")
    p.add_argument(
        "--embed-depth",
        action="store_true",
        help="self-compress the depth map into the stream",
    )
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a stream back to a PNG")
    p.add_argument("--checkpoint", help=f"model file (or ${CHECKPOINT_ENV})")
    p.add_argument("--input", required=True, help="compressed stream")
    p.add_argument("--depth", help="16-bit depth PNG the image was coded with")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="rate sweep and Bjontegaard report")
    p.add_argument("--checkpoint", required=True, help="depth-guided model")
    p.add_argument("--baseline", required=True, help="unguided reference model")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument(
        "--scenario",
        action="append",
        choices=SCENARIOS,
        help="repeatable; default runs all scenarios",
    )
    p.add_argument(
        "--grid",
        default=",".join(str(m) for m in DEFAULT_M_GRID),
        help="comma-separated rate-control values",
    )
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress to stderr"
    )
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (
        DataError,
        BitstreamError,
        CodecError,
        CheckpointError,
        FileNotFoundError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 3
    except Exception as e:  # pragma: no cover - safety net
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
