"""AUROC and PRO metric tests against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adp import metrics
from adp.gridops import bilinear_resize


def pair_count_auroc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ranked correctly, ties half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def flood_fill_regions(mask):
    """Independent 4-connectivity component oracle (BFS)."""
    mask = np.asarray(mask)
    labeled = np.zeros_like(mask, dtype=int)
    current = 0
    for sy in range(mask.shape[0]):
        for sx in range(mask.shape[1]):
            if mask[sy, sx] == 1 and labeled[sy, sx] == 0:
                current += 1
                queue = [(sy, sx)]
                labeled[sy, sx] = current
                while queue:
                    y, x = queue.pop()
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = y + dy, x + dx
                        if (0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1]
                                and mask[ny, nx] == 1 and labeled[ny, nx] == 0):
                            labeled[ny, nx] = current
                            queue.append((ny, nx))
    return labeled, current


def brute_force_pro_curve(score_maps, masks, thresholds):
    """Naive per-threshold recomputation with the flood-fill oracle."""
    pro_values, fpr_values = [], []
    neg_total = sum(int((np.asarray(m) == 0).sum()) for m in masks)
    for t in thresholds:
        overlaps = []
        fp = 0
        for s, m in zip(score_maps, masks):
            s, m = np.asarray(s), np.asarray(m)
            pred = s >= t
            labeled, count = flood_fill_regions(m)
            for rid in range(1, count + 1):
                region = labeled == rid
                overlaps.append(pred[region].sum() / region.sum())
            fp += int(pred[m == 0].sum())
        pro_values.append(float(np.mean(overlaps)))
        fpr_values.append(fp / neg_total if neg_total else 0.0)
    return np.array(pro_values), np.array(fpr_values)


class TestAuroc:
    def test_perfect_separation(self):
        assert metrics.auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties_give_half(self):
        assert metrics.auroc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_matches_pair_count_oracle_on_200_points(self):
        rng = np.random.default_rng(0)
        scores = np.round(rng.uniform(size=200), 2)  # rounded to force ties
        labels = rng.integers(0, 2, size=200)
        if labels.sum() in (0, 200):
            labels[0] = 1 - labels[0]
        got = metrics.auroc(scores, labels)
        assert abs(got - pair_count_auroc(scores, labels)) <= 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            metrics.auroc([0.1, 0.2], [0, 0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([2.0, 0.5, 10.0]))
    def test_invariant_under_monotone_transform(self, seed, rate):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=30)
        labels = np.array([0, 1] * 15)
        a = metrics.auroc(scores, labels)
        b = metrics.auroc(np.exp(rate * scores), labels)
        assert abs(a - b) <= 1e-12


class TestConnectedComponents:
    def test_agrees_with_flood_fill_on_random_masks(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mask = (rng.uniform(size=(16, 16)) < 0.4).astype(int)
            labeled, count = metrics.label_regions(mask)
            oracle_labeled, oracle_count = flood_fill_regions(mask)
            assert count == oracle_count
            # same partition up to label permutation
            for rid in range(1, count + 1):
                region = labeled == rid
                ids = np.unique(oracle_labeled[region])
                assert len(ids) == 1 and ids[0] != 0


class TestPro:
    def test_mask_as_score_is_perfect(self):
        rng = np.random.default_rng(2)
        masks = [(rng.uniform(size=(8, 8)) < 0.2).astype(int) for _ in range(4)]
        masks[0][2:4, 2:4] = 1  # guarantee at least one region
        maps = [m.astype(float) for m in masks]
        assert metrics.pro(maps, masks) == pytest.approx(1.0, abs=1e-12)

    def test_all_zero_scores_give_zero_pro_at_positive_thresholds(self):
        masks = [np.zeros((8, 8), dtype=int)]
        masks[0][1:3, 1:3] = 1
        maps = [np.zeros((8, 8))]
        _, pro_values, _ = metrics.pro_curve(maps, masks, thresholds=np.linspace(1.0, 0.1, 10))
        np.testing.assert_array_equal(pro_values, 0.0)

    def test_curve_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        masks, maps = [], []
        for _ in range(3):
            m = np.zeros((8, 8), dtype=int)
            y, x = rng.integers(0, 5, size=2)
            m[y:y + 3, x:x + 2] = 1
            masks.append(m)
            maps.append(rng.uniform(size=(8, 8)))
        thresholds = np.linspace(1.0, 0.0, 50)
        _, pro_values, fpr_values = metrics.pro_curve(maps, masks, thresholds)
        oracle_pro, oracle_fpr = brute_force_pro_curve(maps, masks, thresholds)
        np.testing.assert_allclose(pro_values, oracle_pro, atol=1e-12)
        np.testing.assert_allclose(fpr_values, oracle_fpr, atol=1e-12)

    def test_pro_nondecreasing_as_fpr_grows(self):
        rng = np.random.default_rng(4)
        m = np.zeros((10, 10), dtype=int)
        m[3:6, 3:6] = 1
        maps = [rng.uniform(size=(10, 10))]
        _, pro_values, fpr_values = metrics.pro_curve(maps, [m], 100)
        order = np.argsort(fpr_values, kind="stable")
        assert np.all(np.diff(pro_values[order]) >= -1e-12)

    def test_wider_integration_limit_does_not_decrease_value(self):
        rng = np.random.default_rng(5)
        m = np.zeros((10, 10), dtype=int)
        m[2:5, 6:9] = 1
        maps = [rng.uniform(size=(10, 10))]
        narrow = metrics.pro(maps, [m], fpr_limit=0.3)
        wide = metrics.pro(maps, [m], fpr_limit=1.0)
        assert wide + 1e-12 >= narrow

    def test_no_regions_rejected(self):
        with pytest.raises(ValueError, match="region"):
            metrics.pro([np.zeros((4, 4))], [np.zeros((4, 4), dtype=int)])


class TestEvaluate:
    def test_report_fields_and_per_class(self):
        rng = np.random.default_rng(6)
        n = 12
        labels = [0, 1] * (n // 2)
        classes = ["a"] * 6 + ["b"] * 6
        scores = [0.1 + 0.8 * l + rng.uniform(0, 0.05) for l in labels]
        masks, maps = [], []
        for l in labels:
            m = np.zeros((6, 6), dtype=int)
            s = rng.uniform(0, 0.1, size=(6, 6))
            if l:
                m[2:4, 2:4] = 1
                s[2:4, 2:4] = 1.0
            masks.append(m)
            maps.append(s)
        report = metrics.evaluate(classes, labels, scores, maps, masks)
        assert report.image_auroc == 1.0
        assert report.pro_score == pytest.approx(1.0, abs=1e-9)
        assert set(report.per_class) == {"a", "b"}
        assert "AUROC/PRO" in report.summary_line()
        assert '"image_auroc"' in report.to_json()


class TestBilinearResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(7)
        g = rng.uniform(size=(5, 7))
        np.testing.assert_array_equal(bilinear_resize(g, 5, 7), g)

    def test_constant_maps_stay_constant(self):
        g = np.full((3, 4), 2.5)
        out = bilinear_resize(g, 9, 5)
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_values_stay_within_input_range(self):
        rng = np.random.default_rng(8)
        g = rng.uniform(size=(4, 4))
        out = bilinear_resize(g, 11, 13)
        assert out.min() >= g.min() - 1e-12 and out.max() <= g.max() + 1e-12
