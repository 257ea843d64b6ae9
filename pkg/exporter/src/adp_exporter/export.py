"""Dataset export: images + masks -> multi-level ADFR records + manifest.

Per image: the original features at the configured layers; for train-split
records an augmented twin from the sequentially augmented image; per-level
anomaly fractions computed by exact area averaging of the binary mask over
each patch's grid cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import transforms

from .adfr import append_manifest, pack_record
from .augment import AugmentConfig, build_augmentation
from .backbones import Backbone, default_layers, load_backbone

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ExportConfig:
    backbone: str = "dinov2-base"
    layers: tuple | None = None          # None -> depth default ([3,6,9,12] for 12)
    image_size: int = 224
    alignment_level: int = 0             # which exported level feeds reference matching
    augment: bool = True                 # twins for train-split records
    augment_params: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 42
    weights_path: str | None = None
    random_init: bool = False
    test_width: int | None = None        # tiny hidden size for offline validation


def resolve_layers(config: ExportConfig, backbone: Backbone) -> tuple[int, ...]:
    layers = config.layers if config.layers is not None else default_layers(backbone.depth)
    layers = tuple(int(l) for l in layers)
    for l in layers:
        if not 1 <= l <= backbone.depth:
            raise ValueError(f"layer {l} out of range for a {backbone.depth}-layer backbone")
    if config.alignment_level < 0 or config.alignment_level >= len(layers):
        raise ValueError(f"alignment level {config.alignment_level} out of range")
    return layers


def patch_fractions(mask: np.ndarray, grid: int) -> np.ndarray:
    """Exact area average of a binary pixel mask over each grid cell."""
    h, w = mask.shape
    if h % grid or w % grid:
        raise ValueError(f"mask {mask.shape} not divisible into a {grid}x{grid} patch grid")
    cell_h, cell_w = h // grid, w // grid
    blocks = mask.reshape(grid, cell_h, grid, cell_w)
    return blocks.mean(axis=(1, 3)).astype(np.float32)


def _load_image(path, size: int) -> Image.Image:
    img = Image.open(path).convert("RGB")
    resize = transforms.Resize(size, interpolation=transforms.InterpolationMode.BILINEAR)
    crop = transforms.CenterCrop(size)
    return crop(resize(img))


def _load_mask(path, image_path, size: int) -> np.ndarray:
    mask_img = Image.open(path).convert("L")
    with Image.open(image_path) as img:
        if mask_img.size != img.size:
            raise ValueError(f"mask {path} size {mask_img.size} does not match "
                             f"image {image_path} size {img.size}")
    values = np.unique(np.asarray(mask_img))
    if not np.isin(values, (0, 1, 255)).all():
        raise ValueError(f"mask {path} is not binary (values {values[:6]})")
    resize = transforms.Resize(size, interpolation=transforms.InterpolationMode.NEAREST)
    crop = transforms.CenterCrop(size)
    return (np.asarray(crop(resize(mask_img))) > 0).astype(np.float32)


def _to_tensor(img: Image.Image, mean, std) -> torch.Tensor:
    t = transforms.functional.to_tensor(img)
    t = transforms.functional.normalize(t, mean, std)
    return t.unsqueeze(0)


def find_mask(masks_dir: Path | None, image_path: Path):
    if masks_dir is None:
        return None
    for suffix in IMAGE_SUFFIXES:
        candidate = masks_dir / (image_path.stem + suffix)
        if candidate.exists():
            return candidate
    return None


def export_dataset(images_dir, masks_dir, split: str, class_id: str,
                   out_dir, config: ExportConfig) -> Path:
    """Export every image in ``images_dir``; returns the manifest path.

    Images with a matching mask file are labeled by whether the mask has any
    positive pixel; images without one are normal.  Augmented twins are
    attached to train-split records (unless augmentation is disabled).
    """
    images_dir = Path(images_dir)
    masks_dir = Path(masks_dir) if masks_dir else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if split not in ("train", "reference", "test"):
        raise ValueError(f"unknown split '{split}', allowed: train, reference, test")
    images = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise ValueError(f"no images found under {images_dir}")

    torch.manual_seed(config.seed)
    backbone = load_backbone(config.backbone, config.weights_path, config.random_init,
                             config.image_size, config.test_width)
    layers = resolve_layers(config, backbone)
    grid = config.image_size // backbone.patch_size
    augment = build_augmentation(config.augment_params) if (config.augment and split == "train") else None

    entries = []
    for image_path in images:
        image = _load_image(image_path, config.image_size)
        mask_path = find_mask(masks_dir, image_path)
        if mask_path is not None:
            mask = _load_mask(mask_path, image_path, config.image_size)
        else:
            mask = np.zeros((config.image_size, config.image_size), dtype=np.float32)
        label = int(mask.max() > 0)

        levels = backbone.extract(_to_tensor(image, backbone.mean, backbone.std), layers)
        augmented = None
        if augment is not None:
            twin = augment(image)
            augmented = backbone.extract(_to_tensor(twin, backbone.mean, backbone.std), layers)
        fractions = [patch_fractions(mask, grid) for _ in layers]

        image_id = f"{class_id}_{split}_{image_path.stem}"
        rel = f"{image_id}.adfr"
        (out_dir / rel).write_bytes(pack_record(
            image_id=image_id, class_id=class_id, image_label=label,
            levels=levels, augmented=augmented, fractions=fractions))
        entries.append({"record_path": rel, "class_id": class_id,
                        "split": split, "image_label": label})
    manifest_path = out_dir / "manifest.jsonl"
    append_manifest(manifest_path, entries)
    return manifest_path
