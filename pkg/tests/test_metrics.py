"""Metric pinned values, independent oracles, and report assembly."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist
from scipy.stats import ks_2samp

from htcgan.errors import ShapeError
from htcgan.metrics import (
    PSNR_IDENTICAL,
    MetricsReport,
    dice,
    evaluate_stage,
    hd95,
    ks_statistic,
    psnr,
    ssim,
)

# ---------------------------------------------------------------------------
# K-S
# ---------------------------------------------------------------------------

def test_ks_identical_multisets():
    a = [0.3, 0.1, 0.1, 0.9]
    assert ks_statistic(a, list(reversed(a))) == 0.0


def test_ks_disjoint_supports():
    assert ks_statistic([0.1, 0.2], [0.5, 0.9]) == 1.0


def test_ks_pinned_interleaved():
    a = [0.1, 0.2, 0.3, 0.4]
    b = [0.15, 0.25, 0.35, 0.45]
    assert ks_statistic(a, b) == pytest.approx(0.25, abs=1e-12)


def test_ks_empty_errors():
    with pytest.raises(ValueError):
        ks_statistic([], [0.1])


@given(st.integers(0, 2**31 - 1), st.integers(2, 300), st.integers(2, 300))
@settings(max_examples=50, deadline=None)
def test_ks_matches_scipy(seed, n, m):
    r = np.random.default_rng(seed)
    a = r.normal(0, 1, n)
    b = r.normal(0.3, 1.4, m)
    ours = ks_statistic(a, b)
    ref = ks_2samp(a, b, method="asymp").statistic
    assert ours == pytest.approx(ref, abs=1e-12)
    assert ks_statistic(b, a) == pytest.approx(ours, abs=1e-15)  # symmetry


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_ks_monotone_transform_invariant(seed):
    r = np.random.default_rng(seed)
    a = r.normal(0, 1, 80)
    b = r.normal(0.5, 2, 60)
    base = ks_statistic(a, b)
    for f in (np.exp, lambda x: x**3 + 2 * x, lambda x: np.arctan(x)):
        assert ks_statistic(f(a), f(b)) == pytest.approx(base, abs=1e-12)


def test_ks_with_ties_between_samples():
    # breakpoints shared by both samples must be handled at the right side
    a = [1.0, 2.0, 2.0, 3.0]
    b = [2.0, 3.0, 3.0, 4.0]
    # ECDFs: at 1: .25/0; at 2: .75/.25; at 3: 1/.75; at 4: 1/1
    assert ks_statistic(a, b) == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def test_psnr_identical_sentinel(rng):
    img = rng.random((16, 16))
    assert psnr(img, img.copy()) is PSNR_IDENTICAL
    assert math.isinf(psnr(img, img))


def test_psnr_pinned_offset():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.1)
    assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-6)


def test_psnr_matches_direct_formula(rng):
    a = rng.random((12, 12))
    b = rng.random((12, 12))
    mse = np.mean((a - b) ** 2)
    assert psnr(a, b) == pytest.approx(10 * math.log10(1.0 / mse), abs=1e-6)
    assert psnr(a, b, peak=2.0) == pytest.approx(10 * math.log10(4.0 / mse), abs=1e-6)
    assert psnr(b, a) == psnr(a, b)  # symmetric


def test_psnr_monotone_in_noise(rng):
    base = rng.random((32, 32))
    noise = rng.standard_normal((32, 32))
    values = [psnr(base, base + amp * noise) for amp in (0.02, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


def test_psnr_argument_errors(rng):
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.ones((4, 4)), peak=0.0)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _ssim_oracle(a, b, window=7, k1=0.01, k2=0.03, peak=1.0):
    """Brute-force sliding-window recomputation (population moments)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            wa = a[i : i + window, j : j + window]
            wb = b[i : i + window, j : j + window]
            mu_a, mu_b = wa.mean(), wb.mean()
            var_a, var_b = wa.var(), wb.var()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def test_ssim_identical_is_exactly_one(rng):
    img = rng.random((20, 20))
    assert ssim(img, img.copy()) == 1.0


def test_ssim_equal_constants():
    a = np.full((16, 16), 0.6)
    assert ssim(a, a.copy()) == 1.0


def test_ssim_pinned_constant_pair():
    a = np.full((16, 16), 0.2)
    b = np.full((16, 16), 0.8)
    # (2*0.16 + 1e-4) / (0.04 + 0.64 + 1e-4) with variance terms collapsed
    assert ssim(a, b) == pytest.approx(0.4704, abs=1e-3)
    expect = (2 * 0.16 + 1e-4) / (0.68 + 1e-4)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_matches_sliding_window_oracle(rng):
    a = rng.random((14, 15))
    b = np.clip(a + 0.2 * rng.standard_normal((14, 15)), 0, 1)
    assert ssim(a, b, window=5) == pytest.approx(_ssim_oracle(a, b, window=5), abs=1e-10)
    assert ssim(a, b, window=7) == pytest.approx(_ssim_oracle(a, b, window=7), abs=1e-10)
    assert ssim(b, a) == pytest.approx(ssim(a, b), abs=1e-12)


def test_ssim_bounds_and_window_validation(rng):
    a = rng.random((9, 9))
    with pytest.raises(ValueError):
        ssim(a, a, window=4)
    with pytest.raises(ValueError):
        ssim(a, a, window=11)
    with pytest.raises(ShapeError):
        ssim(a, rng.random((9, 8)))
    b = rng.random((9, 9))
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_gaussian_window_flag(rng):
    a = rng.random((16, 16))
    b = np.clip(a + 0.1 * rng.standard_normal((16, 16)), 0, 1)
    u = ssim(a, b)
    g = ssim(a, b, gaussian_window=True)
    assert g != u and -1.0 <= g <= 1.0
    assert ssim(a, a, gaussian_window=True) == 1.0


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def test_dice_pinned_cases():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True  # |A| = 4
    b = np.zeros((4, 4), bool)
    b[1:3, :2] = True  # |B| = 4, overlap 2
    assert dice(a, b) == 0.5
    assert dice(a, a.copy()) == 1.0
    disjoint = np.zeros((4, 4), bool)
    disjoint[3, 3] = True
    assert dice(a, disjoint) == 0.0
    assert dice(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_dice_bounds_and_symmetry(seed):
    r = np.random.default_rng(seed)
    a = r.random((10, 10)) < 0.4
    b = r.random((10, 10)) < 0.4
    d = dice(a, b)
    assert 0.0 <= d <= 1.0
    assert dice(b, a) == d
    # adding a pixel to both masks never decreases the intersection
    i, j = r.integers(0, 10, 2)
    a2, b2 = a.copy(), b.copy()
    a2[i, j] = b2[i, j] = True
    assert (a2 & b2).sum() >= (a & b).sum()


# ---------------------------------------------------------------------------
# HD95
# ---------------------------------------------------------------------------

def _hd95_oracle(a, b, spacing=(1.0, 1.0)):
    """All-pairs boundary recomputation with an independent boundary rule."""

    def boundary(mask):
        pts = []
        for i, j in np.argwhere(mask):
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            for r, c in nbrs:
                if not (0 <= r < mask.shape[0] and 0 <= c < mask.shape[1]) or not mask[r, c]:
                    pts.append((i, j))
                    break
        return np.asarray(pts, float) * np.asarray(spacing, float)

    pa, pb = boundary(a), boundary(b)
    d = cdist(pa, pb)
    return max(
        float(np.percentile(d.min(axis=1), 95)),
        float(np.percentile(d.min(axis=0), 95)),
    )


def test_hd95_identical_masks(rng):
    m = rng.random((12, 12)) < 0.3
    m[5, 5] = True
    assert hd95(m, m.copy()) == 0.0


def test_hd95_single_pixels_five_apart():
    a = np.zeros((12, 12), bool)
    b = np.zeros((12, 12), bool)
    a[3, 2] = True
    b[3, 7] = True
    assert hd95(a, b) == pytest.approx(5.0, abs=1e-12)
    assert hd95(a, b, spacing=(2.0, 2.0)) == pytest.approx(10.0, abs=1e-12)


def test_hd95_offset_squares_match_brute_force():
    a = np.zeros((12, 12), bool)
    b = np.zeros((12, 12), bool)
    a[3:6, 3:6] = True
    b[5:8, 3:6] = True  # offset by (2, 0)
    assert hd95(a, b) == pytest.approx(_hd95_oracle(a, b), abs=1e-12)


def test_hd95_anisotropic_spacing():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[2, 2] = True
    b[2, 5] = True  # 3 columns apart
    assert hd95(a, b, spacing=(1.0, 0.5)) == pytest.approx(1.5, abs=1e-12)


def test_hd95_empty_mask_errors():
    with pytest.raises(ValueError):
        hd95(np.zeros((4, 4), bool), np.ones((4, 4), bool))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_hd95_random_masks_vs_oracle_and_hausdorff(seed):
    r = np.random.default_rng(seed)
    a = r.random((9, 9)) < 0.35
    b = r.random((9, 9)) < 0.35
    a[int(r.integers(0, 9)), int(r.integers(0, 9))] = True
    b[int(r.integers(0, 9)), int(r.integers(0, 9))] = True
    ours = hd95(a, b)
    assert ours == pytest.approx(_hd95_oracle(a, b), abs=1e-9)
    assert hd95(b, a) == pytest.approx(ours, abs=1e-12)  # symmetric
    # the 95th percentile never exceeds the exact (100th percentile) Hausdorff
    def directed_max(x, y):
        px = np.argwhere(_bnd(x)).astype(float)
        py = np.argwhere(_bnd(y)).astype(float)
        return float(cdist(px, py).min(axis=1).max())

    def _bnd(mask):
        out = np.zeros_like(mask)
        for i, j in np.argwhere(mask):
            for rr, cc in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if not (0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1]) or not mask[rr, cc]:
                    out[i, j] = True
                    break
        return out

    exact = max(directed_max(a, b), directed_max(b, a))
    assert ours <= exact + 1e-9


# ---------------------------------------------------------------------------
# evaluate_stage / report assembly
# ---------------------------------------------------------------------------

def _nested_maps(rng, n=3, size=24):
    maps = []
    for _ in range(n):
        m = np.zeros((size, size), np.int32)
        r0 = int(rng.integers(2, 8))
        m[r0 : r0 + 12, r0 : r0 + 12] = 1
        m[r0 + 3 : r0 + 9, r0 + 3 : r0 + 9] = 2
        maps.append(m)
    return maps


def test_evaluate_perfect_predictions(rng):
    gts = _nested_maps(rng)
    report = evaluate_stage([g.copy() for g in gts], gts)
    for k in (1, 2):
        entry = report.regions[f"region{k}"]
        assert entry["dice"]["mean"] == 1.0
        assert entry["dice"]["n"] == 3
        assert entry["hd95"]["mean"] == 0.0


def test_evaluate_identical_images(rng):
    gts = _nested_maps(rng)
    imgs = [rng.random((24, 24)) for _ in gts]
    report = evaluate_stage(
        [g.copy() for g in gts], gts,
        synthetic_images=imgs, target_images=[i.copy() for i in imgs],
    )
    for k in (1, 2):
        assert report.regions[f"region{k}"]["ks_pooled"] == 0.0
    assert report.regions["image"]["ssim"]["mean"] == 1.0
    assert math.isinf(report.regions["image"]["psnr"]["mean"])
    assert "normal" in report.regions  # background intensity pool reported


def test_evaluate_cross_checks_standalone_calls(rng):
    gts = _nested_maps(rng)
    preds = [np.roll(g, 1, axis=0) for g in gts]
    syn = [np.clip(g * 0.4 + 0.1 + 0.02 * rng.standard_normal(g.shape), 0, 1) for g in gts]
    tgt = [np.clip(g * 0.45 + 0.12, 0, 1) for g in gts]
    report = evaluate_stage(preds, gts, synthetic_images=syn, target_images=tgt)

    for k in (1, 2):
        entry = report.regions[f"region{k}"]
        dices = [dice(p >= k, g >= k) for p, g in zip(preds, gts)]
        assert entry["dice"]["mean"] == pytest.approx(np.mean(dices), abs=1e-9)
        hds = [hd95(p >= k, g >= k) for p, g in zip(preds, gts)]
        assert entry["hd95"]["mean"] == pytest.approx(np.mean(hds), abs=1e-9)
        pooled_s = np.concatenate([s[g >= k] for s, g in zip(syn, gts)])
        pooled_t = np.concatenate([t[g >= k] for t, g in zip(tgt, gts)])
        assert entry["ks_pooled"] == pytest.approx(
            ks_statistic(pooled_s, pooled_t), abs=1e-9
        )
    img = report.regions["image"]
    assert img["psnr"]["mean"] == pytest.approx(
        np.mean([psnr(s, t) for s, t in zip(syn, tgt)]), abs=1e-9
    )
    assert img["ssim"]["mean"] == pytest.approx(
        np.mean([ssim(s, t) for s, t in zip(syn, tgt)]), abs=1e-9
    )


def test_evaluate_argument_errors(rng):
    gts = _nested_maps(rng)
    with pytest.raises(ValueError):
        evaluate_stage(gts[:2], gts)
    with pytest.raises(ValueError):
        evaluate_stage(gts, gts, synthetic_images=[gts[0]], target_images=gts)


def test_report_json_and_csv(tmp_path, rng):
    gts = _nested_maps(rng)
    report = evaluate_stage(
        [np.roll(g, 1, axis=1) for g in gts], gts,
        region_names={1: "whole", 2: "core"}, config={"stage": 1},
    )
    path = tmp_path / "report.json"
    report.save(path)
    blob = path.read_text()
    assert '"whole"' in blob and '"core"' in blob and '"timestamp"' in blob
    report.export_csv(tmp_path / "report.csv")
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert lines[0] == "case,region,dice,hd95,psnr,ssim,ks"
    assert len(lines) == 1 + 2 * len(gts)


def test_report_round_trip_types():
    rep = MetricsReport(regions={"r": {"dice": {"mean": 1.0, "std": 0.0, "n": 2}}})
    obj = rep.to_json()
    assert obj["regions"]["r"]["dice"]["n"] == 2
    assert isinstance(obj["timestamp"], float)
