"""Residual features: reference banks, nearest-reference matching, labels.

A residual feature is a patch feature minus its nearest reference feature
(Euclidean, ties broken by lowest bank row).  Matching is exact brute force
per level; banks stay small enough at desk scale that correctness wins over
an approximate index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import Manifest, ManifestEntry, MultiLevelFeatureRecord


@dataclass
class ReferenceBank:
    """Per-level flattened normal reference features.

    ``rows[l]`` has shape (K * H_l * W_l, C_l); row order is reference order,
    then h, then w.
    """

    rows: list[np.ndarray]
    reference_ids: list[str]

    @property
    def k(self) -> int:
        return len(self.reference_ids)

    def level_count(self) -> int:
        return len(self.rows)


@dataclass
class ResidualRecord:
    """Per-level residual grids and patch labels for one record."""

    image_id: str
    class_id: str
    image_label: int
    residuals: list[np.ndarray]           # (H, W, C) per level
    labels: list[np.ndarray]              # (H, W) uint8 per level
    augmented_residuals: list[np.ndarray] | None = None


def build_bank(references: list[MultiLevelFeatureRecord]) -> ReferenceBank:
    """Flatten normal reference records into one matching bank per level."""
    if not references:
        raise ValueError("build_bank: empty reference list")
    shapes = references[0].level_shapes()
    for rec in references:
        if rec.image_label != 0:
            raise ValueError(f"build_bank: reference '{rec.image_id}' is not normal")
        if rec.level_shapes() != shapes:
            raise ValueError(f"build_bank: reference '{rec.image_id}' level dims "
                             f"{rec.level_shapes()} != {shapes}")
    rows = []
    for lvl in range(len(shapes)):
        h, w, c = shapes[lvl]
        stacked = np.concatenate([rec.levels[lvl].values.reshape(h * w, c)
                                  for rec in references], axis=0)
        rows.append(np.ascontiguousarray(stacked))
    return ReferenceBank(rows, [rec.image_id for rec in references])


def nearest_rows(features: np.ndarray, bank_rows: np.ndarray) -> np.ndarray:
    """Index of the nearest bank row per feature (ties -> lowest row index)."""
    if features.shape[1] != bank_rows.shape[1]:
        raise ValueError(f"nearest_rows: width mismatch {features.shape} vs {bank_rows.shape}")
    # squared distances via the expansion; argmin picks the first minimum
    f2 = (features * features).sum(axis=1)[:, None]
    b2 = (bank_rows * bank_rows).sum(axis=1)[None, :]
    d2 = f2 + b2 - 2.0 * (features @ bank_rows.T)
    return np.argmin(d2, axis=1)


def residualize(record: MultiLevelFeatureRecord, bank: ReferenceBank,
                label_threshold: float = 0.0, require_labels: bool = True) -> ResidualRecord:
    """Match every patch to its nearest bank row and subtract it.

    Patch labels are 1 where the stored anomaly fraction exceeds
    ``label_threshold`` (default 0: any anomalous pixel marks the patch).
    ``require_labels=False`` lets abnormal records without fraction maps
    through with all-zero labels (scoring does not need ground truth).
    """
    if len(record.levels) != bank.level_count():
        raise ValueError(f"residualize: record has {len(record.levels)} levels, "
                         f"bank has {bank.level_count()}")
    if require_labels and record.image_label == 1 and record.anomaly_fraction_maps is None:
        raise ValueError(f"residualize: abnormal record '{record.image_id}' "
                         "has no anomaly fraction maps")
    residuals, labels, aug_residuals = [], [], []
    for lvl, grid in enumerate(record.levels):
        h, w, c = grid.shape
        rows = bank.rows[lvl]
        if rows.shape[1] != c:
            raise ValueError(f"residualize: level {lvl} width {c} != bank width {rows.shape[1]}")
        flat = grid.values.reshape(h * w, c)
        idx = nearest_rows(flat, rows)
        residuals.append((flat - rows[idx]).reshape(h, w, c))
        if record.anomaly_fraction_maps is not None:
            lab = (record.anomaly_fraction_maps[lvl] > label_threshold).astype(np.uint8)
        else:
            lab = np.zeros((h, w), dtype=np.uint8)
        labels.append(lab)
        if record.augmented_levels is not None:
            aflat = record.augmented_levels[lvl].values.reshape(h * w, c)
            aidx = nearest_rows(aflat, rows)
            aug_residuals.append((aflat - rows[aidx]).reshape(h, w, c))
    return ResidualRecord(record.image_id, record.class_id, record.image_label,
                          residuals, labels,
                          aug_residuals if record.augmented_levels is not None else None)


def sample_references(pool, k_choices, rng: np.random.Generator) -> list[ManifestEntry]:
    """Draw K ~ uniform(k_choices) then K distinct normal entries uniformly.

    ``pool`` is a Manifest or a list of manifest entries.
    """
    entries = pool.entries if isinstance(pool, Manifest) else pool
    normal = [e for e in entries if e.image_label == 0]
    choices = sorted(set(int(k) for k in k_choices))
    if not choices or min(choices) < 1:
        raise ValueError("sample_references: k_choices must be positive")
    if len(normal) < max(choices):
        raise ValueError(f"sample_references: pool has {len(normal)} normal entries, "
                         f"need at least {max(choices)}")
    k = choices[int(rng.integers(len(choices)))]
    picked = rng.choice(len(normal), size=k, replace=False)
    return [normal[i] for i in picked]


def reference_pool(manifest: Manifest, class_id: str | None = None) -> list[ManifestEntry]:
    """Normal train entries, optionally restricted to one class."""
    pool = [e for e in manifest.split("train") if e.image_label == 0]
    if class_id is not None:
        pool = [e for e in pool if e.class_id == class_id]
    return pool
