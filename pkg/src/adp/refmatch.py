"""Semantic-aligned reference retrieval via grid histograms and KL divergence.

A feature map is divided into S x S spatial cells; a per-cell codebook of
k-means centers (pooled over all normal images) turns every patch feature
into a histogram of mapped cosine similarities against all S^2 * N_c centers.
Two images compare cell-by-cell: per patch position KL(candidate || query),
per cell the maximum over positions, globally the mean over cells.  Lower
means better aligned; the K lowest candidates become the reference set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .store import Manifest, ManifestEntry, MultiLevelFeatureRecord, write_tagged, read_tagged

HISTOGRAM_FLOOR = 1e-8


@dataclass
class AlignmentCodebook:
    grid_size: int                      # S
    centers_per_cell: int               # N_c
    centers: np.ndarray                 # (S*S, N_c, C)
    padded_cells: list[int] = field(default_factory=list)
    seed: int = 0

    @property
    def all_centers(self) -> np.ndarray:
        s2, n_c, c = self.centers.shape
        return self.centers.reshape(s2 * n_c, c)


@dataclass
class HistogramSignature:
    grid_size: int
    histograms: list[np.ndarray]        # per cell: (positions_in_cell, S^2 * N_c)
    zero_norm_positions: int = 0


@dataclass
class AlignmentResult:
    degrees: np.ndarray                 # per candidate, pool order
    selected: list[int]                 # K pool indices, ascending by degree
    selected_entries: list[ManifestEntry] = field(default_factory=list)


def cell_slices(size: int, grid_size: int) -> list[slice]:
    """Floor-sized blocks; the remainder goes to the last row/column of cells."""
    if size < grid_size:
        raise ValueError(f"refmatch: map side {size} smaller than grid {grid_size}")
    block = size // grid_size
    out = []
    for i in range(grid_size):
        lo = i * block
        hi = size if i == grid_size - 1 else (i + 1) * block
        out.append(slice(lo, hi))
    return out


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Seeded Lloyd's algorithm (single restart).

    Returns (centers, padded): when the cell has fewer distinct points than
    k, missing centers duplicate the cell mean and ``padded`` is True.
    Assignment ties go to the lowest center index; empty clusters keep their
    previous center.
    """
    points = np.asarray(points, dtype=np.float64)
    distinct = np.unique(points, axis=0)
    if len(distinct) < k:
        mean = points.mean(axis=0)
        centers = np.concatenate([distinct, np.tile(mean, (k - len(distinct), 1))])
        return centers, True
    pick = rng.choice(len(distinct), size=k, replace=False)
    centers = distinct[pick].copy()
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    return centers, False


def build_codebook(pool_maps: list[np.ndarray], grid_size: int = 5,
                   centers_per_cell: int = 5, seed: int = 42) -> AlignmentCodebook:
    """Cluster pooled per-cell patch features into N_c centers per cell."""
    if not pool_maps:
        raise ValueError("refmatch: empty pool")
    h, w, c = pool_maps[0].shape
    for m in pool_maps:
        if m.shape != (h, w, c):
            raise ValueError("refmatch: pool feature maps must share dims")
    rows = cell_slices(h, grid_size)
    cols = cell_slices(w, grid_size)
    rng = np.random.default_rng(seed)
    centers = np.zeros((grid_size * grid_size, centers_per_cell, c))
    padded = []
    for u, rs in enumerate(rows):
        for v, cs in enumerate(cols):
            cell = u * grid_size + v
            pts = np.concatenate([m[rs, cs].reshape(-1, c) for m in pool_maps])
            centers[cell], was_padded = kmeans(pts, centers_per_cell, rng)
            if was_padded:
                padded.append(cell)
    return AlignmentCodebook(grid_size, centers_per_cell, centers, padded, seed)


def signature(feature_map: np.ndarray, codebook: AlignmentCodebook) -> HistogramSignature:
    """Per-patch histograms of (1+cos)/2 similarities to all codebook centers."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    h, w, c = feature_map.shape
    if c != codebook.centers.shape[2]:
        raise ValueError(f"refmatch: feature width {c} does not match codebook "
                         f"{codebook.centers.shape[2]}")
    all_centers = codebook.all_centers
    c_norms = np.linalg.norm(all_centers, axis=1)
    rows = cell_slices(h, codebook.grid_size)
    cols = cell_slices(w, codebook.grid_size)
    hists = []
    zero_positions = 0
    for rs in rows:
        for cs in cols:
            pts = feature_map[rs, cs].reshape(-1, c)
            norms = np.linalg.norm(pts, axis=1)
            zero = norms == 0
            zero_positions += int(zero.sum())
            safe = np.where(zero, 1.0, norms)
            cos = (pts @ all_centers.T) / (safe[:, None] * np.where(c_norms == 0, 1.0, c_norms)[None, :])
            cos[zero] = 0.0  # zero-norm features: similarity defined as 0
            cos[:, c_norms == 0] = 0.0
            hist = (1.0 + cos) / 2.0 + HISTOGRAM_FLOOR
            hist /= hist.sum(axis=1, keepdims=True)
            hists.append(hist)
    return HistogramSignature(codebook.grid_size, hists, zero_positions)


def alignment_degree(query: HistogramSignature, candidate: HistogramSignature) -> float:
    """Mean over cells of the worst per-position KL(candidate || query)."""
    if query.grid_size != candidate.grid_size or len(query.histograms) != len(candidate.histograms):
        raise ValueError("refmatch: signatures built on different grids")
    worst = []
    for hq, hc in zip(query.histograms, candidate.histograms):
        if hq.shape != hc.shape:
            raise ValueError("refmatch: signature histogram shapes differ "
                             f"({hq.shape} vs {hc.shape})")
        kl = (hc * np.log(hc / hq)).sum(axis=1)  # floor keeps both strictly positive
        worst.append(float(kl.max()))
    return float(np.mean(worst))


def match_signatures(query: HistogramSignature, candidates: list[HistogramSignature],
                     k: int) -> AlignmentResult:
    if len(candidates) < k:
        raise ValueError(f"refmatch: pool of {len(candidates)} smaller than k={k}")
    degrees = np.array([alignment_degree(query, c) for c in candidates])
    order = np.lexsort((np.arange(len(candidates)), degrees))  # ties -> pool order
    return AlignmentResult(degrees, [int(i) for i in order[:k]])


def match_references(query_record: MultiLevelFeatureRecord, pool_manifest: Manifest,
                     k: int = 8, level: int = 0, grid_size: int = 5,
                     centers_per_cell: int = 5, seed: int = 42,
                     signatures: dict | None = None) -> AlignmentResult:
    """Retrieve the k pool records most spatially aligned with the query.

    The codebook and candidate signatures come from the pool's normal images
    at the chosen level (precomputed ``signatures`` may be passed in).  The
    pool is ordered canonically by record path, which makes the result
    invariant to manifest file order (ties break on that canonical order).
    """
    normals = sorted((e for e in pool_manifest.entries if e.image_label == 0),
                     key=lambda e: e.record_path)
    if len(normals) < k:
        raise ValueError(f"refmatch: pool has {len(normals)} normal images, need {k}")
    if signatures is None:
        records = [pool_manifest.load(e) for e in normals]
        maps = [r.levels[level].values for r in records]
        codebook = build_codebook(maps, grid_size, centers_per_cell, seed)
        candidate_sigs = [signature(m, codebook) for m in maps]
    else:
        codebook = signatures["codebook"]
        candidate_sigs = signatures["signatures"]
        if len(candidate_sigs) != len(normals):
            raise ValueError("refmatch: cached signature count mismatches pool")
    query_sig = signature(query_record.levels[level].values, codebook)
    result = match_signatures(query_sig, candidate_sigs, k)
    result.selected_entries = [normals[i] for i in result.selected]
    return result


# ---------------------------------------------------------------------------
# disk cache for pool signatures (checkpoint container format)
# ---------------------------------------------------------------------------


def save_signatures(codebook: AlignmentCodebook, sigs: list[HistogramSignature], path) -> None:
    fields: dict = {
        "grid_size": codebook.grid_size,
        "centers_per_cell": codebook.centers_per_cell,
        "seed": codebook.seed,
        "centers": codebook.centers.astype(np.float64),
        "padded_cells": np.asarray(codebook.padded_cells, dtype=np.int64),
        "count": len(sigs),
    }
    for i, sig in enumerate(sigs):
        fields[f"sig{i}.zero_norm_positions"] = sig.zero_norm_positions
        for cell, hist in enumerate(sig.histograms):
            fields[f"sig{i}.cell{cell}"] = hist.astype(np.float64)
    write_tagged(fields, path)


def load_signatures(path) -> tuple[AlignmentCodebook, list[HistogramSignature]]:
    fields = read_tagged(path)
    codebook = AlignmentCodebook(int(fields["grid_size"]), int(fields["centers_per_cell"]),
                                 fields["centers"],
                                 [int(x) for x in fields["padded_cells"]],
                                 int(fields["seed"]))
    cells = codebook.grid_size ** 2
    sigs = []
    for i in range(int(fields["count"])):
        hists = [fields[f"sig{i}.cell{cell}"] for cell in range(cells)]
        sigs.append(HistogramSignature(codebook.grid_size, hists,
                                       int(fields[f"sig{i}.zero_norm_positions"])))
    return codebook, sigs
