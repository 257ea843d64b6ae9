"""Scoring pipeline: checkpoint + manifests -> score files -> evaluation.

Scoring is per class: each class gets its own reference bank (the manifest's
``reference`` split, falling back to all its normal entries) and, for the
fitted scorers, its own model estimated on the class's normal train records.
Score files are JSON lines; per-image patch maps are single-level ADFR grids.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import scorers
from .gridops import bilinear_resize
from .metrics import EvalReport, evaluate
from .pretrain import TrainedState
from .projector import project
from .residual import build_bank, residualize
from .store import (FeatureGrid, Manifest, ManifestEntry, MultiLevelFeatureRecord,
                    read_record, save_manifest, write_record)

SCORING_METHODS = ("featurenorm", "padim", "patchcore")


def reference_records(refs_manifest: Manifest, class_id: str) -> list[MultiLevelFeatureRecord]:
    """The class's reference split, or all its normal entries when absent."""
    entries = [e for e in refs_manifest.split("reference") if e.class_id == class_id]
    if not entries:
        entries = [e for e in refs_manifest.entries
                   if e.class_id == class_id and e.image_label == 0]
    if not entries:
        raise ValueError(f"scoring: no reference records for class '{class_id}'")
    return [refs_manifest.load(e) for e in entries]


def project_levels(record: MultiLevelFeatureRecord, bank, state: TrainedState) -> list[np.ndarray]:
    """Residualize against the bank and project; one (H, W, C) grid per level."""
    rr = residualize(record, bank, state.config.label_threshold, require_labels=False)
    out = []
    for lvl in state.levels:
        h, w, c = rr.residuals[lvl].shape
        flat = rr.residuals[lvl].reshape(h * w, c)
        projected = project(flat.astype(np.float32), state.params[lvl])
        out.append(np.asarray(projected.data, dtype=np.float64).reshape(h, w, c))
    return out


def _fit_model(method: str, state: TrainedState, train_manifest: Manifest,
               class_id: str, bank, coreset_fraction: float):
    if method == "featurenorm":
        return None
    normals = [e for e in train_manifest.split("train")
               if e.class_id == class_id and e.image_label == 0]
    if not normals:
        raise ValueError(f"scoring: method '{method}' needs normal train records "
                         f"for class '{class_id}'")
    stacks = None
    for entry in normals:
        levels = project_levels(train_manifest.load(entry), bank, state)
        if stacks is None:
            stacks = [[] for _ in levels]
        for i, grid in enumerate(levels):
            stacks[i].append(grid)
    if method == "padim":
        return scorers.fit_gaussian([np.stack(s) for s in stacks])
    if method == "patchcore":
        pools = [np.concatenate([g.reshape(-1, g.shape[2]) for g in s]) for s in stacks]
        return scorers.build_coreset(pools, fraction=coreset_fraction)
    raise ValueError(f"scoring: unknown method '{method}'")


def _score_one(method: str, levels: list[np.ndarray], model,
               aggregation: str, top_k: int) -> scorers.ScoreMap:
    if method == "featurenorm":
        return scorers.featurenorm_score(levels, aggregation, top_k)
    if method == "padim":
        return scorers.mahalanobis_score(levels, model, aggregation, top_k)
    if method == "patchcore":
        return scorers.knn_score(levels, model, aggregation, top_k)
    raise ValueError(f"scoring: unknown method '{method}'")


def score_manifest(state: TrainedState, refs_manifest: Manifest, test_manifest: Manifest,
                   method: str, out_path, map_dir=None, aggregation: str = "max",
                   top_k: int = 10, coreset_fraction: float = 0.1) -> Path:
    """Score every test-split record; writes JSONL + per-image map records."""
    if method not in SCORING_METHODS:
        raise ValueError(f"scoring: method must be one of {SCORING_METHODS}")
    out_path = Path(out_path)
    map_dir = Path(map_dir) if map_dir is not None else out_path.parent / (out_path.stem + "_maps")
    map_dir.mkdir(parents=True, exist_ok=True)
    test_entries = test_manifest.split("test")
    if not test_entries:
        raise ValueError("scoring: manifest test split is empty")
    lines = []
    by_class: dict = {}
    for e in test_entries:
        by_class.setdefault(e.class_id, []).append(e)
    for class_id in sorted(by_class):
        bank = build_bank(reference_records(refs_manifest, class_id))
        model = _fit_model(method, state, test_manifest, class_id, bank, coreset_fraction)
        for entry in by_class[class_id]:
            record = test_manifest.load(entry)
            levels = project_levels(record, bank, state)
            smap = _score_one(method, levels, model, aggregation, top_k)
            map_name = f"{record.image_id}.adfr"
            fused = smap.fused.astype(np.float32)[:, :, None]
            map_record = MultiLevelFeatureRecord(record.image_id, class_id,
                                                 entry.image_label, [FeatureGrid(fused)])
            write_record(map_record, map_dir / map_name)
            lines.append({
                "image_id": record.image_id,
                "class_id": class_id,
                "image_label": entry.image_label,
                "record_path": entry.record_path,
                "image_score": smap.image_score,
                "score_map": str((map_dir / map_name).relative_to(out_path.parent))
                if map_dir.is_relative_to(out_path.parent) else str(map_dir / map_name),
            })
    out_path.write_text("".join(json.dumps(line) + "\n" for line in lines))
    return out_path


def read_scores(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"scores file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{lineno}: invalid score line: {e}") from e
    if not out:
        raise ValueError(f"scores file is empty: {path}")
    return out


def ground_truth_mask(record: MultiLevelFeatureRecord) -> np.ndarray:
    """Binary mask at the finest fraction-map grid (any anomalous pixel -> 1)."""
    if record.anomaly_fraction_maps is None:
        shapes = [g.shape for g in record.levels]
        h, w, _ = max(shapes, key=lambda s: s[0] * s[1])
        return np.zeros((h, w), dtype=int)
    finest = max(record.anomaly_fraction_maps, key=lambda m: m.shape[0] * m.shape[1])
    return (finest > 0).astype(int)


def evaluate_scores(scores_path, masks_manifest: Manifest,
                    fpr_limit: float = 0.3, thresholds: int = 200) -> EvalReport:
    """Join score lines with ground truth from the manifest and evaluate."""
    scores = read_scores(scores_path)
    by_path = {e.record_path: e for e in masks_manifest.entries}
    base = Path(scores_path).parent
    class_ids, labels, image_scores, score_maps, masks = [], [], [], [], []
    for line in scores:
        entry = by_path.get(line["record_path"])
        if entry is None:
            raise ValueError(f"eval: score line '{line['image_id']}' has no manifest entry")
        record = masks_manifest.load(entry)
        mask = ground_truth_mask(record)
        map_path = Path(line["score_map"])
        if not map_path.is_absolute():
            map_path = base / map_path
        map_record = read_record(map_path)
        smap = map_record.levels[0].values[:, :, 0].astype(np.float64)
        if smap.shape != mask.shape:
            smap = bilinear_resize(smap, *mask.shape)
        class_ids.append(line["class_id"])
        labels.append(int(entry.image_label))
        image_scores.append(float(line["image_score"]))
        score_maps.append(smap)
        masks.append(mask)
    return evaluate(class_ids, labels, image_scores, score_maps, masks,
                    fpr_limit, thresholds)


def write_projected(state: TrainedState, manifest: Manifest, refs_manifest: Manifest,
                    out_dir) -> Path:
    """Materialize projected features for every record; returns the new manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    banks: dict = {}
    for entry in manifest.entries:
        record = manifest.load(entry)
        if entry.class_id not in banks:
            banks[entry.class_id] = build_bank(reference_records(refs_manifest, entry.class_id))
        levels = project_levels(record, banks[entry.class_id], state)
        grids = [FeatureGrid(g.astype(np.float32)) for g in levels]
        fractions = None
        if record.anomaly_fraction_maps is not None:
            fractions = [record.anomaly_fraction_maps[lvl] for lvl in state.levels]
        projected = MultiLevelFeatureRecord(record.image_id, record.class_id,
                                            record.image_label, grids, None, fractions)
        rel = f"{record.image_id}.proj.adfr"
        write_record(projected, out_dir / rel)
        entries.append(ManifestEntry(rel, entry.class_id, entry.split, entry.image_label))
    out_manifest = out_dir / "manifest.jsonl"
    save_manifest(Manifest(entries, base_dir=out_dir), out_manifest)
    return out_manifest
