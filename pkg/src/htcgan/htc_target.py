"""Construct high-tissue-contrast target images from label maps.

Each label class is redrawn from a configured Normal distribution so the
class-conditional intensity distributions barely overlap in the target
domain; the (mean, std) pairs are hyperparameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import MissingClassError, ShapeError

# Defaults: strong separation without the artifacts that sigma -> 0 causes.
DEFAULT_FOREGROUND = (0.75, 0.05)
DEFAULT_BACKGROUND = (0.25, 0.05)


@dataclass
class TargetDistribution:
    """Per-class (mean, std) of the target-domain intensity Normals."""

    means: dict[int, float]
    stds: dict[int, float]

    def __post_init__(self):
        self.means = {int(k): float(v) for k, v in self.means.items()}
        self.stds = {int(k): float(v) for k, v in self.stds.items()}
        if set(self.means) != set(self.stds):
            raise ValueError("means and stds must cover the same classes")
        for c, m in self.means.items():
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"class {c} mean {m} outside [0, 1]")
            if not np.isfinite(self.stds[c]) or self.stds[c] < 0:
                raise ValueError(f"class {c} std {self.stds[c]} invalid")
        ordered = [m for _, m in sorted(self.means.items())]
        for a, b in zip(ordered, ordered[1:]):
            if a == b:
                raise ValueError("adjacent class means must be separated")

    @classmethod
    def binary(
        cls,
        foreground: tuple[float, float] = DEFAULT_FOREGROUND,
        background: tuple[float, float] = DEFAULT_BACKGROUND,
    ) -> "TargetDistribution":
        return cls(
            means={0: background[0], 1: foreground[0]},
            stds={0: background[1], 1: foreground[1]},
        )

    def to_json(self) -> dict:
        return {
            "means": {str(k): v for k, v in sorted(self.means.items())},
            "stds": {str(k): v for k, v in sorted(self.stds.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TargetDistribution":
        return cls(
            means={int(k): v for k, v in obj["means"].items()},
            stds={int(k): v for k, v in obj["stds"].items()},
        )


@dataclass
class ClassStats:
    """Per-class sample mean/std/count of one labeled image."""

    means: dict[int, float]
    stds: dict[int, float]
    counts: dict[int, int]


def build_htc_target(
    labels: np.ndarray, dist: TargetDistribution, seed: int
) -> np.ndarray:
    """Draw every pixel from its class Normal, clipped to [0, 1].

    Deterministic given seed; classes with sigma = 0 collapse to their
    means exactly.
    """
    labels = np.asarray(labels)
    present = {int(v) for v in np.unique(labels)}
    missing = present - set(dist.means)
    if missing:
        raise MissingClassError(f"no target distribution for classes {sorted(missing)}")
    mu = np.zeros(labels.shape, dtype=np.float64)
    sigma = np.zeros(labels.shape, dtype=np.float64)
    for c in present:
        sel = labels == c
        mu[sel] = dist.means[c]
        sigma[sel] = dist.stds[c]
    rng = np.random.default_rng(seed)
    out = rng.normal(mu, sigma)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def class_stats(image: np.ndarray, labels: np.ndarray) -> ClassStats:
    """Exact per-class sample mean/std/pixel count."""
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.shape != labels.shape:
        raise ShapeError("image and labels differ in shape")
    means, stds, counts = {}, {}, {}
    for c in np.unique(labels):
        vals = image[labels == c]
        means[int(c)] = float(vals.mean())
        stds[int(c)] = float(vals.std())
        counts[int(c)] = int(vals.size)
    return ClassStats(means, stds, counts)


def class_overlap_report(
    image: np.ndarray, labels: np.ndarray
) -> dict[tuple[int, int], float]:
    """Pairwise two-sample K-S statistic between class intensity pools.

    Classes with zero pixels are skipped (they simply do not appear in
    any pair). Raises if fewer than two classes are present.
    """
    from .metrics import ks_statistic

    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.shape != labels.shape:
        raise ShapeError("image and labels differ in shape")
    classes = [int(c) for c in np.unique(labels)]
    if len(classes) < 2:
        raise ValueError("need at least two classes for an overlap report")
    pools = {c: image[labels == c] for c in classes}
    report = {}
    for i, a in enumerate(classes):
        for b in classes[i + 1 :]:
            report[(a, b)] = ks_statistic(pools[a], pools[b])
    return report
