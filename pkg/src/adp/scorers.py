"""Anomaly scorers over projected residual features.

Three scorers share the same shape: per-level patch scores fused onto the
finest level grid (bilinear resample + average), with the image score taken
as the max of the fused map (a top-k mean is selectable).

* feature-norm: patch score is the L2 norm of the projected feature.
* Gaussian/Mahalanobis: per-position multivariate Gaussian with diagonal
  shrinkage, scored by Mahalanobis distance via a Cholesky solve.
* coreset-kNN: greedy k-center subset of the normal features, scored by the
  distance to the nearest coreset row (single neighbor, no re-weighting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridops import bilinear_resize


@dataclass
class ScoreMap:
    level_scores: list[np.ndarray]   # (H_l, W_l) per level
    fused: np.ndarray                # finest-grid average of the level maps
    image_score: float


def fuse_levels(level_maps: list[np.ndarray]) -> np.ndarray:
    """Resample every level map to the finest grid and average."""
    if not level_maps:
        raise ValueError("fuse_levels: no level maps")
    finest = max((m.shape for m in level_maps), key=lambda s: s[0] * s[1])
    resized = [bilinear_resize(m, *finest) for m in level_maps]
    return np.mean(resized, axis=0)


def image_score_from(fused: np.ndarray, aggregation: str = "max", top_k: int = 10) -> float:
    if aggregation == "max":
        return float(fused.max())
    if aggregation == "topk_mean":
        flat = np.sort(fused.ravel())[::-1]
        return float(flat[:max(1, min(top_k, flat.size))].mean())
    raise ValueError(f"image score: unknown aggregation '{aggregation}'")


def _assemble(level_scores: list[np.ndarray], aggregation: str, top_k: int) -> ScoreMap:
    fused = fuse_levels(level_scores)
    return ScoreMap(level_scores, fused, image_score_from(fused, aggregation, top_k))


def featurenorm_score(projected_levels: list[np.ndarray],
                      aggregation: str = "max", top_k: int = 10) -> ScoreMap:
    """Patch score = L2 norm of the projected feature."""
    level_scores = [np.linalg.norm(grid, axis=2) for grid in projected_levels]
    return _assemble(level_scores, aggregation, top_k)


# ---------------------------------------------------------------------------
# per-position Gaussian (PaDiM-style)
# ---------------------------------------------------------------------------


@dataclass
class GaussianModel:
    means: list[np.ndarray]       # (H, W, C) per level
    cholesky: list[np.ndarray]    # (H, W, C, C) lower factors of shrunk covariance
    shrinkage: float


def fit_gaussian(level_feature_stacks: list[np.ndarray], shrinkage: float = 0.01) -> GaussianModel:
    """Fit a per-position Gaussian per level from stacks of (M, H, W, C) features."""
    means, chols = [], []
    for lvl, stack in enumerate(level_feature_stacks):
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim != 4 or stack.shape[0] < 2:
            raise ValueError(f"fit_gaussian: level {lvl} needs >= 2 samples per position")
        m, h, w, c = stack.shape
        mean = stack.mean(axis=0)
        chol = np.zeros((h, w, c, c))
        eye = np.eye(c)
        for y in range(h):
            for x in range(w):
                diff = stack[:, y, x, :] - mean[y, x]
                cov = diff.T @ diff / (m - 1) + shrinkage * eye
                try:
                    chol[y, x] = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError as e:
                    raise ValueError(f"fit_gaussian: level {lvl} position ({y}, {x}) "
                                     "covariance singular after shrinkage") from e
        means.append(mean)
        chols.append(chol)
    return GaussianModel(means, chols, shrinkage)


def mahalanobis_score(projected_levels: list[np.ndarray], model: GaussianModel,
                      aggregation: str = "max", top_k: int = 10) -> ScoreMap:
    """Patch score = sqrt((x-mu)^T Sigma^-1 (x-mu)) via triangular solves."""
    if len(projected_levels) != len(model.means):
        raise ValueError("mahalanobis: level count mismatch with model")
    level_scores = []
    for grid, mean, chol in zip(projected_levels, model.means, model.cholesky):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != mean.shape:
            raise ValueError(f"mahalanobis: grid {grid.shape} does not match model {mean.shape}")
        h, w, _ = grid.shape
        out = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                diff = grid[y, x] - mean[y, x]
                z = np.linalg.solve(chol[y, x], diff)  # lower-triangular factor
                out[y, x] = np.sqrt(float(z @ z))
        level_scores.append(out)
    return _assemble(level_scores, aggregation, top_k)


# ---------------------------------------------------------------------------
# greedy k-center coreset (PatchCore-style)
# ---------------------------------------------------------------------------


@dataclass
class Coreset:
    rows: list[np.ndarray]         # selected feature rows per level
    indices: list[np.ndarray]      # row indices into the training pool per level
    fraction: float


def greedy_k_center(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Farthest-point selection of k indices, deterministic from ``start``."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("k-center: empty point set")
    k = min(k, n)
    selected = [start]
    dists = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dists))
        selected.append(nxt)
        dists = np.minimum(dists, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(selected, dtype=np.int64)


def build_coreset(level_feature_pools: list[np.ndarray], fraction: float = 0.1) -> Coreset:
    """Select ceil(fraction * M) rows per level by greedy k-center from row 0."""
    if not 0 < fraction <= 1:
        raise ValueError("coreset: fraction must be in (0, 1]")
    rows, indices = [], []
    for pool in level_feature_pools:
        pool = np.asarray(pool, dtype=np.float64)
        if pool.ndim != 2 or pool.shape[0] == 0:
            raise ValueError("coreset: empty training set")
        k = max(1, int(np.ceil(fraction * pool.shape[0])))
        idx = greedy_k_center(pool, k)
        indices.append(idx)
        rows.append(pool[idx])
    return Coreset(rows, indices, fraction)


def knn_score(projected_levels: list[np.ndarray], coreset: Coreset,
              aggregation: str = "max", top_k: int = 10) -> ScoreMap:
    """Patch score = Euclidean distance to the nearest coreset row."""
    if len(projected_levels) != len(coreset.rows):
        raise ValueError("knn: level count mismatch with coreset")
    level_scores = []
    for grid, rows in zip(projected_levels, coreset.rows):
        grid = np.asarray(grid, dtype=np.float64)
        h, w, c = grid.shape
        flat = grid.reshape(h * w, c)
        d2 = ((flat * flat).sum(axis=1)[:, None] + (rows * rows).sum(axis=1)[None, :]
              - 2.0 * flat @ rows.T)
        level_scores.append(np.sqrt(np.maximum(d2.min(axis=1), 0.0)).reshape(h, w))
    return _assemble(level_scores, aggregation, top_k)
