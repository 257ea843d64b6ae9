"""adp-export: extract backbone patch features into ADFR records."""

from __future__ import annotations

import argparse
import sys

from .augment import AugmentConfig
from .backbones import REGISTRY
from .export import ExportConfig, export_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adp-export",
        description="Export frozen-backbone patch features as ADFR records.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--backbone", default="dinov2-base", choices=sorted(REGISTRY))
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--masks", default=None,
                        help="directory of binary masks (same stems as images)")
    parser.add_argument("--split", required=True, choices=("train", "reference", "test"))
    parser.add_argument("--class-id", default=None,
                        help="class label for the manifest (default: images dir name)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--layers", default=None,
                        help="comma-separated 1-based layer indices (default: depth rule)")
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--alignment-level", type=int, default=0,
                        help="exported level index used for reference matching")
    parser.add_argument("--no-augment", action="store_true",
                        help="skip augmented twins even for the train split")
    parser.add_argument("--weights", default=None,
                        help="local pretrained weights directory for the backbone")
    parser.add_argument("--random-init", action="store_true",
                        help="randomly initialized backbone (pipeline validation only)")
    parser.add_argument("--seed", type=int, default=42)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    layers = None
    if args.layers:
        layers = tuple(int(p) for p in args.layers.split(","))
    config = ExportConfig(
        backbone=args.backbone, layers=layers, image_size=args.image_size,
        alignment_level=args.alignment_level, augment=not args.no_augment,
        augment_params=AugmentConfig(), seed=args.seed,
        weights_path=args.weights, random_init=args.random_init)
    class_id = args.class_id or str(args.images).rstrip("/").split("/")[-1]
    print(f"backbone={config.backbone} layers={layers or 'default'} "
          f"image_size={config.image_size} split={args.split} class_id={class_id} "
          f"seed={config.seed}")
    try:
        manifest = export_dataset(args.images, args.masks, args.split, class_id,
                                  args.out, config)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {manifest}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
