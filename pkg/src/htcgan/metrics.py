"""Evaluation metrics: two-sample K-S, PSNR, SSIM, Dice, HD95, and the
per-region report assembly."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter
from scipy.spatial import cKDTree

from .errors import ShapeError

PSNR_IDENTICAL = math.inf  # sentinel for zero-MSE pairs


def ks_statistic(samples_a, samples_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: the supremum over all
    breakpoints of |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("K-S statistic needs nonempty samples")
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / a.size
    cdf_b = np.searchsorted(b, points, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf sentinel for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def ssim(
    a,
    b,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
    gaussian_window: bool = False,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity over sliding windows (uniform window by
    default, Gaussian behind the flag). Only fully-interior windows count."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if window > min(a.shape):
        raise ValueError(f"window {window} exceeds image extent {min(a.shape)}")

    if gaussian_window:
        smooth = lambda x: gaussian_filter(x, sigma, mode="nearest")
    else:
        smooth = lambda x: uniform_filter(x, window, mode="nearest")
    mu_a = smooth(a)
    mu_b = smooth(b)
    e_aa = smooth(a * a)
    e_bb = smooth(b * b)
    e_ab = smooth(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    ssim_map = num / den
    m = window // 2
    return float(ssim_map[m : a.shape[0] - m, m : a.shape[1] - m].mean())


def dice(mask_a, mask_b) -> float:
    """Dice overlap of two boolean masks; both-empty counts as 1.0."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of true pixels with a false 4-neighbor (image border
    counts as outside)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = mask & ~interior
    return np.argwhere(boundary)


def hd95(mask_a, mask_b, spacing: tuple[float, float] = (1.0, 1.0)) -> float:
    """Symmetric 95th-percentile boundary distance in mm.

    Max over both directions of the 95th percentile (linear interpolation)
    of nearest-boundary distances, coordinates scaled by spacing.
    """
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"hd95 shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("hd95 is undefined for empty masks")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = _boundary_points(a) * scale
    pb = _boundary_points(b) * scale
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def _agg(values: list[float]) -> dict:
    if not values:
        return {}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class MetricsReport:
    """Per-region metric summary plus provenance metadata."""

    regions: dict[str, dict]
    config: dict = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)

    def to_json(self) -> dict:
        return {
            "regions": self.regions,
            "config": self.config,
            "timestamp": self.timestamp,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def export_csv(self, path: str | Path) -> None:
        """One row per (case, region) for the per-case metrics."""
        rows = []
        for region, entry in self.regions.items():
            for i, case in enumerate(entry.get("cases", [])):
                rows.append({"case": i, "region": region, **case})
        fields = ["case", "region", "dice", "hd95", "psnr", "ssim", "ks"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)


def evaluate_stage(
    predictions: Sequence[np.ndarray],
    ground_truths: Sequence[np.ndarray],
    synthetic_images: Sequence[np.ndarray] | None = None,
    target_images: Sequence[np.ndarray] | None = None,
    labels: Sequence[np.ndarray] | None = None,
    spacing: tuple[float, float] = (1.0, 1.0),
    region_names: dict[int, str] | None = None,
    config: dict | None = None,
    keep_cases: bool = True,
) -> MetricsReport:
    """Aggregate metrics over aligned prediction/ground-truth label maps.

    Region k (k >= 1) is the nested union `map >= k`; region 0 ("normal")
    is the background pool, reported for the intensity metrics only.
    Dice/HD95 compare predictions with ground truths; K-S/PSNR/SSIM
    compare synthetic images with target images per class of `labels`
    (defaults to the ground-truth maps).
    """
    preds = [np.asarray(p).astype(np.int32) for p in predictions]
    gts = [np.asarray(g).astype(np.int32) for g in ground_truths]
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    with_images = synthetic_images is not None and target_images is not None
    if with_images and not (
        len(synthetic_images) == len(target_images) == len(preds)
    ):
        raise ValueError("image sequences must align with the mask sequences")
    if labels is None:
        labels = gts
    region_names = region_names or {}

    max_label = max((int(g.max()) for g in gts), default=0)
    if with_images:
        max_label = max(max_label, max(int(np.max(l)) for l in labels))
    regions: dict[str, dict] = {}

    for k in range(0, max_label + 1):
        name = region_names.get(k, "normal" if k == 0 else f"region{k}")
        entry: dict = {}
        cases = []

        if k >= 1:
            dices, hds = [], []
            for p, g in zip(preds, gts):
                pm, gm = p >= k, g >= k
                d = dice(pm, gm)
                dices.append(d)
                case = {"dice": d}
                if pm.any() and gm.any():
                    h = hd95(pm, gm, spacing)
                    hds.append(h)
                    case["hd95"] = h
                cases.append(case)
            entry["dice"] = _agg(dices)
            if hds:
                entry["hd95"] = _agg(hds)

        if with_images:
            pooled_syn, pooled_tgt = [], []
            ks_per_image = []
            for i, (s, t, l) in enumerate(zip(synthetic_images, target_images, labels)):
                sel = (np.asarray(l) >= k) if k >= 1 else (np.asarray(l) == 0)
                if not sel.any():
                    continue
                sv = np.asarray(s, dtype=np.float64)[sel]
                tv = np.asarray(t, dtype=np.float64)[sel]
                pooled_syn.append(sv)
                pooled_tgt.append(tv)
                ks_i = ks_statistic(sv, tv)
                ks_per_image.append(ks_i)
                if k >= 1 and i < len(cases):
                    cases[i]["ks"] = ks_i
            if pooled_syn:
                entry["ks_pooled"] = ks_statistic(
                    np.concatenate(pooled_syn), np.concatenate(pooled_tgt)
                )
                entry["ks"] = _agg(ks_per_image)

        if entry:
            if keep_cases and cases:
                entry["cases"] = cases
            regions[name] = entry

    if with_images:
        psnrs = [psnr(s, t) for s, t in zip(synthetic_images, target_images)]
        ssims = [ssim(s, t) for s, t in zip(synthetic_images, target_images)]
        regions["image"] = {"psnr": _agg(psnrs), "ssim": _agg(ssims)}
        if keep_cases:
            regions["image"]["cases"] = [
                {"psnr": p, "ssim": s} for p, s in zip(psnrs, ssims)
            ]

    return MetricsReport(regions=regions, config=config or {})
