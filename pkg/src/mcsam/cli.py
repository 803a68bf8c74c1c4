"""Command-line interface: train / eval / predict / params / dry-run."""

import argparse
import glob
import logging
import os
import sys

from mcsam.config import load_config, resolve_policy
from mcsam.encoder import count_adapters
from mcsam.engine import Trainer, build_model, dry_run, evaluate_checkpoint, predict_images
from mcsam.mona import MonaConfig, mona_param_count
from mcsam.peft import apply_policy, trainable_fraction


def _add_common(p):
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config field, e.g. --set decoder.num_queries=30",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="mcsam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _add_common(p)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("predict", help="run inference on images")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="image file, directory, or glob")
    p.add_argument("--viz", action="store_true", help="write instance overlays")
    p.add_argument("--score-thr", type=float, default=0.75)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("params", help="print the PEFT parameter accounting report")
    _add_common(p)

    p = sub.add_parser("dry-run", help="construct the model and run one train step")
    _add_common(p)

    p = sub.add_parser("make-synthetic", help="generate a desk-scale rectangle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=4)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve_inputs(source):
    if os.path.isdir(source):
        paths = sorted(
            p
            for ext in ("*.png", "*.jpg", "*.jpeg", "*.tif", "*.tiff")
            for p in glob.glob(os.path.join(source, ext))
        )
    elif any(ch in source for ch in "*?["):
        paths = sorted(glob.glob(source))
    else:
        paths = [source]
    return paths


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "make-synthetic":
        from mcsam.data.synthetic import make_rectangle_dataset

        ann, images = make_rectangle_dataset(
            args.out, num_images=args.num_images, image_size=args.image_size, seed=args.seed
        )
        print(f"annotations: {ann}\nimages: {images}")
        return 0

    cfg = load_config(args.config, args.overrides)

    if args.command == "train":
        trainer = Trainer(cfg, resume=args.resume)
        ckpt = trainer.train()
        print(f"final checkpoint: {ckpt}")
        if trainer.history["evals"]:
            print("last eval:", trainer.history["evals"][-1])
        return 0

    if args.command == "eval":
        report = evaluate_checkpoint(cfg, args.ckpt)
        print(report.to_table())
        print(report.to_kv_text(), end="")
        return 0

    if args.command == "predict":
        paths = _resolve_inputs(args.input)
        if not paths:
            print(f"no input images under {args.input!r}", file=sys.stderr)
            return 1
        results_path, errors = predict_images(
            cfg, args.ckpt, paths, score_threshold=args.score_thr, viz=args.viz, out_dir=args.out
        )
        print(f"results: {results_path}")
        for err in errors:
            print(f"error: {err['file']}: {err['error']}", file=sys.stderr)
        return 0

    if args.command == "params":
        model = build_model(cfg, allow_missing_weights=True)
        report = apply_policy(model, resolve_policy(cfg.freeze_policy))
        print(report.summary())
        print(f"adapter sites: {count_adapters(cfg.encoder)}")
        if cfg.peft.method == "mona":
            per_block = mona_param_count(
                MonaConfig(
                    input_channels=cfg.encoder.embed_dim,
                    bottleneck_channels=cfg.peft.mona_bottleneck,
                    kernel_sizes=cfg.peft.mona_kernel_sizes,
                )
            )
            print(f"mona parameters per adapter: {per_block}")
            print(f"mona parameters total: {per_block * count_adapters(cfg.encoder)}")
        print(f"trainable fraction: {trainable_fraction(model):.6f}")
        return 0

    if args.command == "dry-run":
        report = dry_run(cfg)
        print(
            f"dry run ok: loss={report['loss']:.4f} "
            f"components={report['components']} "
            f"trainable_fraction={report['trainable_fraction']:.6f} "
            f"tensors_with_grad={report['tensors_with_grad']}/{report['trainable_tensors']} "
            f"({report['seconds']:.1f}s)"
        )
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
