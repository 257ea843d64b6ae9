"""Synthetic multi-level feature fixture for offline end-to-end runs.

Normal patches draw from a per-class Gaussian; abnormal images carry one
contiguous rectangular region whose features are shifted by a fixed multiple
of the feature sigma, with the region's anomaly fractions set to 1.  Train
records get an augmented twin (original plus small seeded jitter).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import (FeatureGrid, Manifest, ManifestEntry, MultiLevelFeatureRecord,
                    save_manifest, write_record)


@dataclass
class SyntheticSpec:
    classes: int = 2
    train_per_class: int = 48
    reference_per_class: int = 8
    test_per_class: int = 40
    abnormal_fraction: float = 0.5       # of train and test images
    level_dims: tuple = ((8, 8, 16), (4, 4, 16))
    feature_sigma: float = 1.0
    class_spread: float = 4.0            # scale of the class mean vectors
    latent_dim: int = 0                  # >0: low-rank class covariance (correlated patches)
    noise_floor: float = 0.15            # diagonal noise on top of the factors
    anomaly_offset_sigma: float = 6.0    # planted shift, in units of feature_sigma
    region_min: float = 0.25             # anomaly rectangle side, fraction of the grid
    region_max: float = 0.5
    augment_jitter: float = 0.1          # twin noise, in units of feature_sigma
    seed: int = 42

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError("synthetic: classes must be >= 1")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            raise ValueError("synthetic: abnormal_fraction must be in [0, 1]")
        if not 0.0 < self.region_min <= self.region_max <= 1.0:
            raise ValueError("synthetic: region bounds must satisfy 0 < min <= max <= 1")
        self.level_dims = tuple(tuple(int(x) for x in d) for d in self.level_dims)
        for d in self.level_dims:
            if len(d) != 3 or min(d) < 1:
                raise ValueError(f"synthetic: bad level dims {d}")


def _region_bounds(frac_lo, frac_hi, size, rng):
    side = max(1, int(round(rng.uniform(frac_lo, frac_hi) * size)))
    side = min(side, size)
    start = int(rng.integers(0, size - side + 1))
    return start, start + side


def _abnormal_count(total: int, fraction: float) -> int:
    return int(round(total * fraction))


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write ADFR records plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    sigma = spec.feature_sigma

    # per class, per level: a fixed mean vector and (optionally) latent factors
    class_means = [[rng.normal(scale=spec.class_spread, size=d[2]) for d in spec.level_dims]
                   for _ in range(spec.classes)]
    class_factors = None
    if spec.latent_dim > 0:
        class_factors = [[rng.normal(scale=1.0 / np.sqrt(spec.latent_dim),
                                     size=(d[2], spec.latent_dim))
                          for d in spec.level_dims]
                         for _ in range(spec.classes)]

    entries: list[ManifestEntry] = []

    def make_image(class_idx: int, abnormal: bool, augmented: bool):
        levels, fractions = [], []
        region = None
        if abnormal:
            # one rectangle in relative coordinates, shared by all levels
            ry = rng.uniform(spec.region_min, spec.region_max)
            rx = rng.uniform(spec.region_min, spec.region_max)
            region = (rng.uniform(0, 1 - ry), ry,
                      rng.uniform(0, 1 - rx), rx)
        for lvl, (h, w, c) in enumerate(spec.level_dims):
            mean = class_means[class_idx][lvl]
            if class_factors is not None:
                z = rng.normal(size=(h, w, spec.latent_dim))
                values = (mean + sigma * (z @ class_factors[class_idx][lvl].T)
                          + sigma * spec.noise_floor * rng.normal(size=(h, w, c)))
            else:
                values = mean + sigma * rng.normal(size=(h, w, c))
            frac = np.zeros((h, w), dtype=np.float32)
            if abnormal:
                y_off, y_frac, x_off, x_frac = region
                y0 = min(h - 1, int(y_off * h))
                y1 = min(h, max(y0 + 1, int(round((y_off + y_frac) * h))))
                x0 = min(w - 1, int(x_off * w))
                x1 = min(w, max(x0 + 1, int(round((x_off + x_frac) * w))))
                direction = rng.normal(size=c)
                direction /= np.linalg.norm(direction)
                values[y0:y1, x0:x1] += spec.anomaly_offset_sigma * sigma * direction
                frac[y0:y1, x0:x1] = 1.0
            levels.append(FeatureGrid(values.astype(np.float32)))
            fractions.append(frac)
        aug = None
        if augmented:
            aug = [FeatureGrid(g.values + spec.augment_jitter * sigma
                               * rng.normal(size=g.shape).astype(np.float32))
                   for g in levels]
        return levels, aug, fractions

    for class_idx in range(spec.classes):
        class_id = f"c{class_idx}"
        plan = []
        n_train_ab = _abnormal_count(spec.train_per_class, spec.abnormal_fraction)
        plan += [("train", i, i < n_train_ab) for i in range(spec.train_per_class)]
        plan += [("reference", i, False) for i in range(spec.reference_per_class)]
        n_test_ab = _abnormal_count(spec.test_per_class, spec.abnormal_fraction)
        plan += [("test", i, i < n_test_ab) for i in range(spec.test_per_class)]
        for split, i, abnormal in plan:
            image_id = f"{class_id}_{split}_{i:03d}"
            levels, aug, fractions = make_image(class_idx, abnormal,
                                                augmented=(split == "train"))
            record = MultiLevelFeatureRecord(image_id, class_id, int(abnormal),
                                             levels, aug, fractions)
            rel_path = f"{image_id}.adfr"
            write_record(record, out_dir / rel_path)
            entries.append(ManifestEntry(rel_path, class_id, split, int(abnormal)))

    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(Manifest(entries, base_dir=out_dir), manifest_path)
    return manifest_path


_SPEC_FIELDS = {
    "classes": int, "train_per_class": int, "reference_per_class": int,
    "test_per_class": int, "abnormal_fraction": float, "feature_sigma": float,
    "class_spread": float, "latent_dim": int, "noise_floor": float,
    "anomaly_offset_sigma": float, "region_min": float,
    "region_max": float, "augment_jitter": float, "seed": int,
}


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse a key=value spec file; level_dims uses HxWxC blocks, e.g.
    ``level_dims=8x8x16,4x4x16``."""
    kwargs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"synthetic spec line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "level_dims":
            dims = []
            for block in value.split(","):
                parts = block.strip().split("x")
                if len(parts) != 3:
                    raise ValueError(f"synthetic spec line {lineno}: bad level dims '{block}'")
                dims.append(tuple(int(p) for p in parts))
            kwargs["level_dims"] = tuple(dims)
        elif key in _SPEC_FIELDS:
            kwargs[key] = _SPEC_FIELDS[key](value)
        else:
            raise ValueError(f"synthetic spec line {lineno}: unknown key '{key}'")
    return SyntheticSpec(**kwargs)
