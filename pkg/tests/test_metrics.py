"""Metric tests against brute-force and closed-form oracles.

Dice scores are recomputed with per-pixel set arithmetic; the Frechet
distance is checked against its one-dimensional closed form and the
commuting-diagonal case; SSIM self-similarity must be exact.
"""

import math

import numpy as np
import pytest

from echoadapt.errors import DimensionMismatch, EmptyInput, ShapeMismatch
from echoadapt.metrics import (
    FEATURE_DIM,
    ConfusionTotals,
    EmbeddingStats,
    class_weighted_dice,
    dice_report,
    extract_features,
    frechet_distance,
    frechet_from_images,
    global_dice,
    mean_ssim,
    per_class_dice,
    ssim,
)
from echoadapt.remap import LabelSpace


def space4():
    return LabelSpace(
        name="quad", classes=((1, "LA"), (2, "LV"), (3, "RV"), (4, "RA")), background_id=0
    )


def brute_force_dice(pairs, class_ids):
    """Per-pixel set arithmetic over the pooled evaluation set."""
    tp = {c: 0 for c in class_ids}
    fp = {c: 0 for c in class_ids}
    fn = {c: 0 for c in class_ids}
    gt_pix = {c: 0 for c in class_ids}
    for pred, gt in pairs:
        for (i, j), p in np.ndenumerate(pred):
            g = gt[i, j]
            for c in class_ids:
                if p == c and g == c:
                    tp[c] += 1
                elif p == c and g != c:
                    fp[c] += 1
                elif p != c and g == c:
                    fn[c] += 1
                if g == c:
                    gt_pix[c] += 1
    num = 2 * sum(tp.values())
    den = num + sum(fp.values()) + sum(fn.values())
    g_dice = 1.0 if den == 0 else num / den
    per = {}
    for c in class_ids:
        d = 2 * tp[c] + fp[c] + fn[c]
        per[c] = None if d == 0 else 2 * tp[c] / d
    total_gt = sum(gt_pix.values())
    if total_gt == 0:
        w_dice = 1.0 if sum(fp.values()) == 0 else 0.0
    else:
        w_dice = sum(
            (gt_pix[c] / total_gt) * per[c] for c in class_ids if per[c] is not None and gt_pix[c]
        )
    return g_dice, per, w_dice


class TestDice:
    def test_random_masks_match_brute_force(self):
        rng = np.random.default_rng(99)
        space = space4()
        ids = [c for c, _ in space.classes]
        for trial in range(20):
            pairs = [
                (rng.integers(0, 5, size=(8, 8)), rng.integers(0, 5, size=(8, 8)))
                for _ in range(5)
            ]
            totals = ConfusionTotals(space)
            for pred, gt in pairs:
                totals.update(pred, gt)
            want_g, want_per, want_w = brute_force_dice(pairs, ids)
            assert global_dice(totals) == pytest.approx(want_g, abs=1e-12)
            got_per = per_class_dice(totals)
            for (cid, name) in space.classes:
                if want_per[cid] is None:
                    assert got_per[name] is None
                else:
                    assert got_per[name] == pytest.approx(want_per[cid], abs=1e-12)
            assert class_weighted_dice(totals) == pytest.approx(want_w, abs=1e-12)

    def test_perfect_prediction(self):
        space = space4()
        rng = np.random.default_rng(1)
        mask = rng.integers(0, 5, size=(16, 16))
        totals = ConfusionTotals(space).update(mask, mask)
        assert global_dice(totals) == 1.0
        assert class_weighted_dice(totals) == 1.0

    def test_absent_class_reports_none(self):
        space = space4()
        gt = np.zeros((4, 4), dtype=int)
        gt[0, 0] = 1  # only LA present
        pred = gt.copy()
        totals = ConfusionTotals(space).update(pred, gt)
        per = per_class_dice(totals)
        assert per["LA"] == 1.0
        assert per["LV"] is None and per["RV"] is None and per["RA"] is None

    def test_report_order_follows_label_space(self):
        totals = ConfusionTotals(space4())
        totals.update(np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int))
        assert list(per_class_dice(totals)) == ["LA", "LV", "RV", "RA"]
        report = dice_report(totals)
        assert report["pairs"] == 1

    def test_all_background_pair_is_perfect(self):
        totals = ConfusionTotals(space4())
        totals.update(np.zeros((4, 4), dtype=int), np.zeros((4, 4), dtype=int))
        assert global_dice(totals) == 1.0
        assert class_weighted_dice(totals) == 1.0

    def test_shape_mismatch(self):
        totals = ConfusionTotals(space4())
        with pytest.raises(ShapeMismatch):
            totals.update(np.zeros((2, 2), dtype=int), np.zeros((3, 3), dtype=int))

    def test_pooling_differs_from_per_image_average(self):
        """Pooled Dice weights images by pixel mass, not uniformly."""
        space = LabelSpace(name="one", classes=((1, "A"),), background_id=0)
        # image 1: tiny overlap; image 2: large and perfect
        pred1 = np.zeros((4, 4), dtype=int)
        gt1 = np.zeros((4, 4), dtype=int)
        pred1[0, 0] = 1
        gt1[0, 1] = 1  # disjoint: dice 0
        pred2 = np.ones((4, 4), dtype=int)
        gt2 = np.ones((4, 4), dtype=int)  # dice 1
        totals = ConfusionTotals(space).update(pred1, gt1).update(pred2, gt2)
        pooled = global_dice(totals)
        per_image_mean = (0.0 + 1.0) / 2
        assert pooled == pytest.approx(2 * 16 / (2 * 16 + 1 + 1))
        assert pooled != pytest.approx(per_image_mean)


class TestSSIM:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(0)
        img = rng.random((32, 32))
        assert abs(ssim(img, img) - 1.0) <= 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_noise_decreases_similarity(self):
        rng = np.random.default_rng(2)
        base = np.tile(np.linspace(0, 1, 32), (32, 1))
        light = np.clip(base + 0.02 * rng.standard_normal(base.shape), 0, 1)
        heavy = np.clip(base + 0.3 * rng.standard_normal(base.shape), 0, 1)
        assert ssim(base, heavy) < ssim(base, light) < 1.0

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a, b = rng.random((16, 16)), rng.random((16, 16))
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_window_larger_than_image_rejected(self):
        with pytest.raises(ShapeMismatch):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_mean_ssim_and_empty(self):
        rng = np.random.default_rng(4)
        imgs = [rng.random((16, 16)) for _ in range(3)]
        assert mean_ssim(imgs, imgs) == pytest.approx(1.0, abs=1e-9)
        with pytest.raises(EmptyInput):
            mean_ssim([], [])

    def test_constant_images_with_offset(self):
        a = np.full((16, 16), 0.25)
        b = np.full((16, 16), 0.75)
        value = ssim(a, b)
        # luminance term only: (2*mu_a*mu_b + c1)/(mu_a^2 + mu_b^2 + c1)
        c1 = 0.01**2
        want = (2 * 0.25 * 0.75 + c1) / (0.25**2 + 0.75**2 + c1)
        assert value == pytest.approx(want, rel=1e-9)


class TestFrechet:
    def test_one_dimensional_closed_form(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            xa = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), size=(50, 1))
            xb = rng.normal(rng.uniform(-2, 2), rng.uniform(0.5, 2), size=(70, 1))
            a = EmbeddingStats.from_features(xa)
            b = EmbeddingStats.from_features(xb)
            mu_a, mu_b = xa.mean(), xb.mean()
            sd_a, sd_b = xa.std(ddof=1), xb.std(ddof=1)
            want = (mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2
            assert abs(frechet_distance(a, b) - want) <= 1e-8

    def test_identical_stats_give_zero(self):
        rng = np.random.default_rng(6)
        x = rng.random((40, 5))
        s = EmbeddingStats.from_features(x)
        assert frechet_distance(s, s) <= 1e-10

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = EmbeddingStats.from_features(rng.random((30, 4)))
        b = EmbeddingStats.from_features(rng.random((30, 4)) + 0.5)
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-10)

    def test_commuting_diagonal_closed_form(self):
        mu_a = np.array([0.0, 1.0, -1.0])
        mu_b = np.array([0.5, 1.0, 0.0])
        da = np.array([1.0, 4.0, 0.25])
        db = np.array([2.0, 1.0, 1.0])
        a = EmbeddingStats(mean=mu_a, cov=np.diag(da), count=10)
        b = EmbeddingStats(mean=mu_b, cov=np.diag(db), count=10)
        want = np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)
        assert frechet_distance(a, b) == pytest.approx(float(want), rel=1e-10)

    def test_mean_shift_only(self):
        d = 4
        cov = np.eye(d) * 0.3
        a = EmbeddingStats(mean=np.zeros(d), cov=cov, count=5)
        b = EmbeddingStats(mean=np.full(d, 2.0), cov=cov.copy(), count=5)
        assert frechet_distance(a, b) == pytest.approx(4.0 * d, rel=1e-10)

    def test_dimension_mismatch(self):
        a = EmbeddingStats(mean=np.zeros(3), cov=np.eye(3), count=5)
        b = EmbeddingStats(mean=np.zeros(4), cov=np.eye(4), count=5)
        with pytest.raises(DimensionMismatch):
            frechet_distance(a, b)

    def test_minimum_sample_count(self):
        with pytest.raises(EmptyInput):
            EmbeddingStats.from_features(np.zeros((1, 3)))


class TestFeatures:
    def test_shape_and_determinism(self):
        rng = np.random.default_rng(8)
        imgs = rng.random((6, 32, 32))
        feats = extract_features(imgs)
        assert feats.shape == (6, FEATURE_DIM)
        assert np.array_equal(feats, extract_features(imgs))
        assert np.all(np.isfinite(feats))

    def test_global_moments_are_first_two(self):
        rng = np.random.default_rng(9)
        img = rng.random((16, 16))
        feats = extract_features(img[None])[0]
        assert feats[0] == pytest.approx(img.mean())
        assert feats[1] == pytest.approx(img.std())

    def test_histogram_fractions_sum_to_one(self):
        rng = np.random.default_rng(10)
        feats = extract_features(rng.random((1, 16, 16)))[0]
        # band layout: [mean, std, h1..h6] x 4 after the two global moments
        for band in range(4):
            start = 2 + band * 8 + 2
            assert feats[start : start + 6].sum() == pytest.approx(1.0)

    def test_distribution_gap_is_visible(self):
        """Two texture families must be farther apart than two draws of one."""
        rng = np.random.default_rng(11)
        smooth_a = rng.random((24, 16, 16)) * 0.1 + 0.2
        smooth_b = rng.random((24, 16, 16)) * 0.1 + 0.2
        rough = rng.random((24, 16, 16))
        within = frechet_from_images(smooth_a, smooth_b)
        across = frechet_from_images(smooth_a, rough)
        assert across > 10 * within
