"""Angle- and norm-oriented contrastive losses and the normal-center estimate.

The angle loss measures cosine similarity about the normal-feature center and
contrasts each anchor only against features with the opposite label.  The
norm loss works on pseudo-Huber feature norms sqrt(|x|^2 + 1) - 1: normal
features are contracted inside radius ``r`` while abnormal ones are pushed
past ``r + margin``, with the loss weighted by e^d so features far on the
wrong side get the largest gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DENOMINATOR_MODES = ("literal", "include_positive")


@dataclass
class LossConfig:
    tau: float = 0.15
    radius: float = 0.4
    margin: float = 0.75
    angle_weight: float = 1.0
    denominator_mode: str = "literal"
    center_momentum: float = 0.9
    angle_anchor_cap: int | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("loss config: tau must be > 0")
        if self.radius <= 0:
            raise ValueError("loss config: radius must be > 0")
        if self.margin < 0:
            raise ValueError("loss config: margin must be >= 0")
        if self.angle_weight < 0:
            raise ValueError("loss config: angle weight must be >= 0")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"loss config: denominator_mode must be one of {DENOMINATOR_MODES}")

    @property
    def push_radius(self) -> float:
        return self.radius + self.margin


@dataclass
class ContrastiveBatch:
    """2N features: rows 0..N-1 originals, rows N..2N-1 their augmented twins."""

    features: ad.Tensor
    labels: np.ndarray
    center: np.ndarray | None = None

    def __post_init__(self):
        self.features = ad.as_tensor(self.features)
        if self.features.data.ndim != 2:
            raise ValueError("batch: features must be (2N, C)")
        rows = self.features.shape[0]
        if rows < 2 or rows % 2 != 0:
            raise ValueError(f"batch: needs an even row count >= 2, got {rows}")
        labels = np.asarray(self.labels)
        if labels.shape != (rows,) or not np.isin(labels, (0, 1)).all():
            raise ValueError("batch: labels must be 0/1 with one entry per row")
        n = rows // 2
        if not np.array_equal(labels[:n], labels[n:]):
            raise ValueError("batch: augmentation must preserve labels (m_i != m_{i+N})")
        self.labels = labels.astype(np.int64)
        if self.center is not None:
            center = np.asarray(self.center)
            if center.shape != (self.features.shape[1],):
                raise ValueError("batch: center width mismatch")
            self.center = center

    @property
    def n(self) -> int:
        return self.features.shape[0] // 2


def pair_loss(pos_sim: float, neg_sims, tau: float, include_positive: bool = False) -> float:
    """Per-anchor contrastive term -log(exp(pos/tau) / sum_k exp(neg_k/tau)).

    The literal denominator admits values below zero when a lone negative is
    less similar than the positive; ``include_positive`` adds the numerator
    term to the denominator, which bounds the loss at zero.
    """
    denom = sum(math.exp(s / tau) for s in neg_sims)
    if include_positive:
        denom += math.exp(pos_sim / tau)
    if denom == 0:
        raise ValueError("pair_loss: empty denominator")
    return math.log(denom) - pos_sim / tau


def _angle_terms(batch: ContrastiveBatch, cfg: LossConfig,
                 rng: np.random.Generator | None = None):
    """Per-anchor angle losses for contributing anchors.

    Returns (loss_vec Tensor over contributing anchors or None, contributing
    count, skipped count).  Anchors are rows 0..N-1; an anchor with no
    opposite-label candidate is skipped.
    """
    if batch.center is None:
        raise ValueError("angle loss: batch has no center")
    n = batch.n
    anchor_ids = np.arange(n)
    cand_ids = np.arange(2 * n)
    if cfg.angle_anchor_cap is not None and n > cfg.angle_anchor_cap:
        if rng is None:
            raise ValueError("angle loss: anchor cap requires a seeded generator")
        anchor_ids = np.sort(rng.choice(n, size=cfg.angle_anchor_cap, replace=False))
        cand_ids = np.sort(rng.choice(2 * n, size=min(2 * n, 2 * cfg.angle_anchor_cap),
                                      replace=False))
    shifted = ad.sub(batch.features, ad.Tensor(batch.center))
    anchors = ad.take_rows(shifted, anchor_ids)
    twins = ad.take_rows(shifted, anchor_ids + n)
    pos = ad.cosine_pairs(anchors, twins)
    # opposite-label indicator; the positive and the anchor itself share the
    # anchor's label, so the label mask alone realizes both exclusions
    mask = (batch.labels[cand_ids][None, :] != batch.labels[anchor_ids][:, None])
    contributing = mask.any(axis=1)
    skipped = int((~contributing).sum())
    if not contributing.any():
        return None, 0, skipped
    keep = np.flatnonzero(contributing)
    sims = ad.cosine_rows(anchors, ad.take_rows(shifted, cand_ids))
    weights = ad.mul(ad.exp(ad.mul(sims, 1.0 / cfg.tau)), ad.Tensor(mask.astype(float)))
    denom = ad.take_rows(ad.row_sum(weights), keep)
    pos_kept = ad.take_rows(pos, keep)
    if cfg.denominator_mode == "include_positive":
        denom = ad.add(denom, ad.exp(ad.mul(pos_kept, 1.0 / cfg.tau)))
    loss_vec = ad.sub(ad.log(denom), ad.mul(pos_kept, 1.0 / cfg.tau))
    return loss_vec, len(keep), skipped


def angle_loss(batch: ContrastiveBatch, cfg: LossConfig,
               rng: np.random.Generator | None = None) -> ad.Tensor:
    """Mean angle-oriented loss over contributing anchors (0 if all skipped)."""
    loss_vec, contributing, _ = _angle_terms(batch, cfg, rng)
    if loss_vec is None:
        return ad.Tensor(0.0)
    return ad.mean_all(loss_vec)


def _norm_vector(batch: ContrastiveBatch, cfg: LossConfig) -> ad.Tensor:
    x = batch.features
    ssq = ad.row_sum(ad.mul(x, x))
    norms = ad.sub(ad.sqrt(ad.add(ssq, 1.0)), 1.0)  # pseudo-Huber norm
    d_in = ad.sub(norms, cfg.radius)
    contract = ad.mul(ad.neg(ad.logsigmoid(ad.neg(d_in))), ad.exp(d_in))
    d_out = ad.add(ad.neg(norms), cfg.push_radius)
    push = ad.mul(ad.neg(ad.logsigmoid(ad.neg(d_out))), ad.exp(d_out))
    n_now = np.asarray(norms.data)
    normal_mask = (batch.labels == 0).astype(float)
    # abnormal features already past the push radius contribute exactly zero
    push_mask = ((batch.labels == 1) & (n_now <= cfg.push_radius)).astype(float)
    return ad.add(ad.mul(contract, ad.Tensor(normal_mask)),
                  ad.mul(push, ad.Tensor(push_mask)))


def norm_loss(batch: ContrastiveBatch, cfg: LossConfig) -> ad.Tensor:
    """Mean norm-oriented loss over all 2N features."""
    return ad.mean_all(_norm_vector(batch, cfg))


def total_loss(batch: ContrastiveBatch, cfg: LossConfig,
               rng: np.random.Generator | None = None) -> tuple[ad.Tensor, dict]:
    """(1/2N) * (lambda * sum of anchor angle losses + sum of norm losses)."""
    rows = 2 * batch.n
    if cfg.angle_weight > 0:
        loss_vec, contributing, skipped = _angle_terms(batch, cfg, rng)
    else:
        loss_vec, contributing, skipped = None, 0, 0
    norm_sum = ad.sum_all(_norm_vector(batch, cfg))
    if loss_vec is not None:
        angle_sum = ad.sum_all(loss_vec)
        combined = ad.add(ad.mul(angle_sum, cfg.angle_weight), norm_sum)
        angle_sum_value = float(angle_sum.data)
    else:
        combined = norm_sum
        angle_sum_value = 0.0
    total = ad.mul(combined, 1.0 / rows)
    breakdown = {
        "total": float(total.data),
        "angle_sum": angle_sum_value,
        "angle_mean": angle_sum_value / contributing if contributing else 0.0,
        "norm_mean": float(norm_sum.data) / rows,
        "contributing_anchors": contributing,
        "skipped_anchors": skipped,
    }
    return total, breakdown


def infonce(batch: ContrastiveBatch, tau: float) -> ad.Tensor:
    """Plain InfoNCE over anchors 0..N-1 (ablation baseline, origin-centered)."""
    if tau <= 0:
        raise ValueError("infonce: tau must be > 0")
    n = batch.n
    if 2 * n < 4:
        raise ValueError("infonce: needs at least 4 features")
    anchors = ad.take_rows(batch.features, np.arange(n))
    twins = ad.take_rows(batch.features, np.arange(n, 2 * n))
    sims = ad.cosine_rows(anchors, batch.features)
    mask = np.ones((n, 2 * n))
    mask[np.arange(n), np.arange(n)] = 0.0  # k != i
    denom = ad.row_sum(ad.mul(ad.exp(ad.mul(sims, 1.0 / tau)), ad.Tensor(mask)))
    pos = ad.cosine_pairs(anchors, twins)
    return ad.mean_all(ad.sub(ad.log(denom), ad.mul(pos, 1.0 / tau)))


def contraction_gradient(d: float) -> float:
    """Analytic d/dd of the contraction term -logsig(-d) * e^d.

    Both terms are nonnegative, so the loss is strictly increasing in the
    signed distance d.
    """
    sig = 1.0 / (1.0 + math.exp(d))  # sigmoid(-d)
    softplus = math.log1p(math.exp(-abs(d))) + max(d, 0.0)  # -logsig(-d)
    return (1.0 - sig) * math.exp(d) + softplus * math.exp(d)


@dataclass
class CenterEstimator:
    """Stop-gradient running mean of projected normal features."""

    momentum: float = 0.9
    center: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.center is not None

    def update(self, normal_features: np.ndarray) -> np.ndarray | None:
        """First call adopts the batch mean; later calls blend by momentum.
        A batch with no normal features is a no-op."""
        feats = np.asarray(normal_features, dtype=np.float64)
        if feats.size == 0:
            return self.center
        mean = feats.mean(axis=0)
        if self.center is None:
            self.center = mean
        else:
            self.center = self.momentum * self.center + (1.0 - self.momentum) * mean
        return self.center


def update_center(estimator: CenterEstimator, normal_features: np.ndarray):
    return estimator.update(normal_features)
