import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsinpaint.losses import (Crop, LossConfig, bin_weights, center_weights, cfdl, cluster_temperature,
                              depth_loss, expanded_crop, oacl, partition_depth_bins, photometric_loss,
                              sdcl, segments_to_labels)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        a = f(x)
        flat[i] = o - h
        b = f(x)
        flat[i] = o
        gf[i] = (a - b) / (2 * h)
    return g


def naive_sdcl(gt, d, region, bins, weights, pixel_w=None):
    """Loop restatement: bins of gt over the region, per-bin mean |d - mean d|, weighted average."""
    g = gt[region]
    lo, hi = g.min(), g.max()
    num = den = 0.0
    members = {}
    for y, x in zip(*np.nonzero(region)):
        k = 0 if hi == lo else min(int(np.floor((gt[y, x] - lo) / (hi - lo) * bins)), bins - 1)
        members.setdefault(k, []).append((y, x))
    for k, pix in members.items():
        vals = [d[p] for p in pix]
        mu = sum(vals) / len(vals)
        pw = [1.0 if pixel_w is None else pixel_w[p] for p in pix]
        num += weights[k] * sum(w * abs(v - mu) for w, v in zip(pw, vals)) / len(vals)
        den += weights[k]
    return num / den


# --- photometric --------------------------------------------------------------

def test_photometric_example():
    r = np.zeros((2, 2, 3))
    t = np.zeros((2, 2, 3))
    t[0, 0] = [0.3, 0.6, 0.9]
    t[1, 1] = 5.0  # outside the mask
    m = np.array([[True, True], [False, False]])
    lv = photometric_loss(r, t, m)
    assert lv.value == pytest.approx(1.8 / 6)
    assert np.all(lv.grad[1] == 0)
    np.testing.assert_allclose(lv.grad[0, 0], -1 / 6)


def test_photometric_empty_mask_is_zero():
    lv = photometric_loss(np.ones((3, 3, 3)), np.zeros((3, 3, 3)), np.zeros((3, 3), bool))
    assert lv.value == 0 and np.all(lv.grad == 0)


def test_photometric_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(np.ones((3, 3, 3)), np.zeros((3, 4, 3)), np.ones((3, 3), bool))


# --- depth bins and SDCL -----------------------------------------------------

def test_partition_equal_width_bins():
    gt = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
    part = partition_depth_bins(gt, gt, np.ones_like(gt, bool), bins=4)
    np.testing.assert_allclose(part.edges, [0, 1, 2, 3, 4])
    # the maximum lands in the last bin
    assert part.labels.tolist() == [[0, 1, 2, 3, 3]]
    assert part.counts.tolist() == [1, 1, 1, 2]


def test_partition_outside_region_is_unlabelled():
    gt = np.arange(6.0).reshape(2, 3)
    reg = np.array([[True, False, True], [False, True, False]])
    part = partition_depth_bins(gt, gt, reg, bins=2)
    assert np.all(part.labels[~reg] == -1)
    with pytest.raises(ValueError):
        partition_depth_bins(gt, gt, np.zeros_like(reg), bins=2)


def test_bin_weights_decrease_with_depth():
    for scheme in ("inverse", "linear", "exponential"):
        w = bin_weights(8, scheme)
        assert w[0] == pytest.approx(1.0)
        assert np.all(np.diff(w) < 0)
    np.testing.assert_allclose(bin_weights(2), [1.0, 0.5])


def test_sdcl_two_bin_example():
    gt = np.array([[0.0, 0.0, 1.0, 1.0]])
    d = np.array([[1.0, 3.0, 4.0, 5.0]])
    part = partition_depth_bins(gt, d, np.ones_like(gt, bool), bins=2)
    # bin 0: mean |r| = 1 (weight 1), bin 1: 0.5 (weight 1/2) -> (1 + 0.25) / 1.5
    assert sdcl(part, d).value == pytest.approx(5 / 6)


def test_sdcl_constant_bins_are_zero():
    gt = np.array([[1.0, 1.0, 2.0, 2.0]])
    d = np.array([[7.0, 7.0, 3.0, 3.0]])
    part = partition_depth_bins(gt, d, np.ones_like(gt, bool), bins=2)
    lv = sdcl(part, d)
    assert lv.value == 0
    assert np.all(lv.grad == 0)


def test_sdcl_matches_loop_oracle(rng):
    for bins in (2, 5, 16):
        gt = rng.uniform(1, 4, (9, 11))
        d = rng.uniform(0, 6, (9, 11))
        reg = rng.uniform(size=(9, 11)) < 0.7
        pw = rng.uniform(0.2, 1, (9, 11))
        part = partition_depth_bins(gt, d, reg, bins=bins)
        w = bin_weights(bins)
        assert sdcl(part, d).value == pytest.approx(naive_sdcl(gt, d, reg, bins, w), rel=1e-12)
        assert sdcl(part, d, pw).value == pytest.approx(naive_sdcl(gt, d, reg, bins, w, pw), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 20), st.integers(0, 10_000))
def test_sdcl_shift_invariant_and_homogeneous(c, a, seed):
    r = np.random.default_rng(seed)
    gt = r.uniform(1, 5, (6, 7))
    d = r.uniform(1, 5, (6, 7))
    reg = np.ones_like(gt, bool)
    part = partition_depth_bins(gt, d, reg, bins=4)
    base = sdcl(part, d).value
    assert sdcl(part, d + c).value == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert sdcl(part, a * d).value == pytest.approx(a * base, rel=1e-9, abs=1e-12)


def test_sdcl_gradient_matches_finite_differences(rng):
    gt = rng.uniform(1, 4, (6, 8))
    d = rng.uniform(0, 6, (6, 8))
    reg = rng.uniform(size=(6, 8)) < 0.8
    pw = rng.uniform(0.2, 1, (6, 8))
    part = partition_depth_bins(gt, d, reg, bins=3)
    lv = sdcl(part, d, pw)
    num = numeric_grad(lambda x: sdcl(part, x, pw).value, d.copy())
    np.testing.assert_allclose(lv.grad, num, atol=1e-8)


# --- CFDL ---------------------------------------------------------------------

def test_expanded_crop_contains_mask_bbox(rng):
    mask = np.zeros((30, 40), bool)
    mask[10:15, 12:20] = True
    for _ in range(50):
        c = expanded_crop(mask, rng, 0.1, 0.5)
        assert c.y0 <= 10 and c.y1 >= 15 and c.x0 <= 12 and c.x1 >= 20
        assert 0 <= c.y0 and c.y1 <= 30 and 0 <= c.x0 and c.x1 <= 40
        # growth per side is at most half the mask extent (rounded)
        assert c.y0 >= 10 - 3 and c.y1 <= 15 + 3 and c.x0 >= 12 - 4 and c.x1 <= 20 + 4


def test_expanded_crop_clips_at_border_and_handles_empty(rng):
    mask = np.zeros((10, 10), bool)
    assert expanded_crop(mask, rng, 0.1, 0.5) is None
    mask[0:4, 7:10] = True
    c = expanded_crop(mask, rng, 0.5, 0.5)
    assert (c.y0, c.x1) == (0, 10)


def test_center_weights_peak_and_sigma():
    crop = Crop(0, 5, 0, 5)
    w = center_weights((5, 5), crop, 0.5)
    assert w[2, 2] == 1.0
    sigma = 0.5 * 0.5 * np.hypot(5, 5)
    assert w[2, 4] == pytest.approx(np.exp(-4 / (2 * sigma**2)))


def test_cfdl_equals_center_weighted_sdcl_over_crop(rng):
    gt = rng.uniform(1, 4, (12, 12))
    d = rng.uniform(0, 6, (12, 12))
    mask = np.zeros((12, 12), bool)
    mask[4:7, 5:8] = True
    crop = Crop(2, 9, 3, 11)
    cfg = LossConfig(bins=4)
    got = cfdl(gt, d, mask, rng, cfg, crop=crop).value
    reg = np.zeros_like(mask)
    reg[2:9, 3:11] = True
    cy, cx = (2 + 8) / 2, (3 + 10) / 2
    sig = 0.5 * 0.5 * np.hypot(8, 7)
    yy, xx = np.mgrid[0:12, 0:12]
    pw = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig**2))
    assert got == pytest.approx(naive_sdcl(gt, d, reg, 4, bin_weights(4), pw), rel=1e-12)


def test_cfdl_without_mask_is_zero(rng):
    lv = cfdl(np.ones((5, 5)), np.ones((5, 5)), np.zeros((5, 5), bool), rng)
    assert lv.value == 0 and np.all(lv.grad == 0)


def test_cfdl_gradient_vanishes_outside_crop(rng):
    gt = rng.uniform(1, 4, (12, 12))
    d = rng.uniform(0, 6, (12, 12))
    mask = np.zeros((12, 12), bool)
    mask[4:7, 5:8] = True
    lv = cfdl(gt, d, mask, rng, LossConfig(), crop=Crop(2, 9, 3, 11))
    outside = np.ones_like(mask)
    outside[2:9, 3:11] = False
    assert np.all(lv.grad[outside] == 0)


def test_depth_loss_combination():
    assert depth_loss(0.2, 0.1, kappa=25) == pytest.approx(2.7)


# --- OACL ---------------------------------------------------------------------

def test_temperature_examples():
    f = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert cluster_temperature(f, epsilon=100) == pytest.approx(np.log(102))
    assert cluster_temperature(np.ones((5, 3)), phi_min=0.01) == 0.01


def naive_oacl(fmap, labels, eps=100.0, phi_min=0.01):
    H, W, D = fmap.shape
    groups = {}
    for y in range(H):
        for x in range(W):
            if labels[y, x] >= 0:
                f = fmap[y, x] / np.linalg.norm(fmap[y, x])
                groups.setdefault(labels[y, x], []).append(f)
    keys = sorted(groups)
    cents = [np.mean(groups[k], axis=0) for k in keys]
    phis = [cluster_temperature(np.array(groups[k]), eps, phi_min) for k in keys]
    total = 0.0
    for si, k in enumerate(keys):
        acc = 0.0
        for u in groups[k]:
            logits = [u @ c / p for c, p in zip(cents, phis)]
            acc += -(logits[si] - np.log(np.sum(np.exp(logits))))
        total += acc / len(groups[k])
    return total / len(keys)


def test_oacl_matches_loop_oracle(rng):
    fmap = rng.normal(size=(6, 7, 5))
    labels = rng.integers(-1, 3, (6, 7))
    assert oacl(fmap, labels).value == pytest.approx(naive_oacl(fmap, labels), rel=1e-12)


def test_oacl_single_segment_is_zero(rng):
    lv = oacl(rng.normal(size=(4, 4, 3)), np.zeros((4, 4), np.int64))
    assert lv.value == 0 and np.all(lv.grad == 0)


def test_oacl_separated_clusters_score_lower(rng):
    labels = np.zeros((4, 8), np.int64)
    labels[:, 4:] = 1
    tight = np.zeros((4, 8, 4))
    tight[:, :4, 0] = 1
    tight[:, 4:, 1] = 1
    tight += rng.normal(0, 0.01, tight.shape)
    mixed = rng.normal(size=(4, 8, 4))
    assert oacl(tight, labels).value < oacl(mixed, labels).value


def test_oacl_invariant_to_segment_relabelling(rng):
    fmap = rng.normal(size=(5, 6, 4))
    labels = rng.integers(0, 3, (5, 6))
    perm = np.array([2, 0, 1])
    assert oacl(fmap, perm[labels]).value == pytest.approx(oacl(fmap, labels).value, rel=1e-12)
    masks = [labels == k for k in range(3)]
    assert oacl(fmap, masks).value == pytest.approx(oacl(fmap, labels).value, rel=1e-12)


def test_oacl_gradient_matches_finite_differences(rng):
    fmap = rng.normal(size=(4, 5, 3))
    labels = rng.integers(-1, 3, (4, 5))
    lv = oacl(fmap, labels)
    num = numeric_grad(lambda x: oacl(x, labels).value, fmap.copy())
    np.testing.assert_allclose(lv.grad, num, atol=1e-7)
    assert np.all(lv.grad[labels < 0] == 0)


def test_oacl_ignores_zero_features(rng):
    fmap = rng.normal(size=(4, 4, 3))
    labels = rng.integers(0, 2, (4, 4))
    fmap[0, 0] = 0
    lv = oacl(fmap, labels)
    assert np.isfinite(lv.value) and np.all(np.isfinite(lv.grad))
    assert np.all(lv.grad[0, 0] == 0)


def test_segments_overlap_rejected():
    m = np.ones((2, 2), bool)
    with pytest.raises(ValueError):
        segments_to_labels([m, m], (2, 2))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kappa=0)
    with pytest.raises(ValueError):
        LossConfig(bins=1)
    with pytest.raises(ValueError):
        LossConfig(weight_scheme="cubic")


# --- closed-form examples -----------------------------------------------------

def test_four_bin_default_weights():
    gt = np.linspace(0, 3.99, 40).reshape(4, 10)
    part = partition_depth_bins(gt, gt, np.ones_like(gt, bool), bins=4)
    np.testing.assert_allclose(part.weights, [1, 3 / 4, 3 / 5, 1 / 2], rtol=1e-15)
    assert part.counts.tolist() == [10, 10, 10, 10]


def test_two_level_depth_splits_cleanly():
    gt = np.array([[1.0, 1.0, 3.0, 3.0]])
    part = partition_depth_bins(gt, gt, np.ones_like(gt, bool), bins=2)
    assert part.labels.tolist() == [[0, 0, 1, 1]]
    flat = partition_depth_bins(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2), bool), bins=3)
    assert flat.counts.tolist() == [4, 0, 0]


def test_single_bin_example():
    gt = np.ones((1, 2))
    d = np.array([[1.0, 3.0]])
    assert sdcl(partition_depth_bins(gt, d, np.ones_like(gt, bool), bins=4), d).value == pytest.approx(1.0)


def test_depth_loss_examples():
    assert depth_loss(0, 0, 25) == 0
    assert depth_loss(1.0, 0.1, 25) == pytest.approx(3.5)
    assert depth_loss(0.2, 0.0, 25) == pytest.approx(0.2)


def test_cfdl_full_image_zero_expansion_is_weighted_sdcl(rng):
    gt = rng.uniform(1, 4, (10, 10))
    d = rng.uniform(0, 6, (10, 10))
    mask = np.ones((10, 10), bool)
    cfg = LossConfig(bins=3, crop_expand_min=0.0, crop_expand_max=0.0)
    got = cfdl(gt, d, mask, rng, cfg)
    pw = center_weights((10, 10), Crop(0, 10, 0, 10), 0.5)
    part = partition_depth_bins(gt, d, mask, bins=3)
    want = sdcl(part, d, pw)
    assert got.value == pytest.approx(want.value, rel=1e-12)
    np.testing.assert_allclose(got.grad, want.grad, atol=1e-15)


def test_oacl_orthogonal_single_pixel_clusters():
    f = np.zeros((1, 2, 16))
    f[0, 0, 0] = 1
    f[0, 1, 1] = 1
    lv = oacl(f, np.array([[0, 1]]), phi_min=0.01)
    assert lv.value == pytest.approx(np.log1p(np.exp(-100.0)), abs=1e-6)
    assert lv.value < 1e-6


def test_oacl_shared_feature_is_log2():
    f = np.zeros((1, 4, 16))
    f[..., 3] = 2.0
    assert oacl(f, np.array([[0, 0, 1, 1]])).value == pytest.approx(np.log(2), abs=1e-12)
