"""Binary foreground segmentation with a dense fully convolutional net,
plus mask-to-bounding-box extraction for stage chaining."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .data_io import BBox
from .errors import ShapeError, TrainingDivergedError
from .networks import DenseSegmenter
from .synthesis import EPS, derive_seed


class SegmenterModel(nn.Module):
    """Dense segmenter with its patch size, binarization threshold, and
    chaining margin."""

    def __init__(
        self,
        patch_size: int = 64,
        in_channels: int = 1,
        num_classes: int = 2,
        base_channels: int = 48,
        growth: int = 12,
        layers_per_block: int = 4,
        num_pools: int | None = None,
        dropout: float = 0.2,
        threshold: float = 0.5,
        bbox_margin: int = 8,
    ):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if num_pools is None:
            num_pools = 3 if patch_size >= 128 else 2
        self.patch_size = patch_size
        self.threshold = threshold
        self.bbox_margin = bbox_margin
        self.epoch = 0
        self.hparams = {
            "patch_size": patch_size,
            "in_channels": in_channels,
            "num_classes": num_classes,
            "base_channels": base_channels,
            "growth": growth,
            "layers_per_block": layers_per_block,
            "num_pools": num_pools,
            "dropout": dropout,
            "threshold": threshold,
            "bbox_margin": bbox_margin,
        }
        self.net = DenseSegmenter(
            in_channels, num_classes, base_channels, growth, layers_per_block,
            num_pools, dropout,
        )

    def forward(self, x):
        return self.net(x)

    def proba(self, x):
        return torch.softmax(self.net(x), dim=1)


@dataclass
class SegmentationResult:
    probability: np.ndarray  # (H, W) foreground probability
    mask: np.ndarray  # (H, W) bool
    bbox: Optional[BBox]  # absent when the mask is empty


def mask_to_bbox(mask, margin: int = 0) -> Optional[BBox]:
    """Tight box around the true pixels, grown by margin and clipped to the
    image; None for an empty mask."""
    m = np.asarray(mask, dtype=bool)
    rows, cols = m.nonzero()
    if rows.size == 0:
        return None
    box = BBox(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    return box.expanded(margin, m.shape) if margin else box


def weighted_cross_entropy(fg_prob, mask, class_weights=(1.0, 1.0), eps: float = EPS):
    """-mean over pixels of w_y * log p_y for binary ground truth.

    `fg_prob` is the foreground probability (any shape); the background
    probability is its complement. Probabilities are clamped to
    [eps, 1-eps] before the log.
    """
    if any(w <= 0 for w in class_weights):
        raise ValueError("class weights must be positive")
    p = torch.as_tensor(fg_prob)
    y = torch.as_tensor(np.asarray(mask)).to(dtype=torch.bool)
    if tuple(p.shape) != tuple(y.shape):
        raise ShapeError(f"probability/mask shapes differ: {tuple(p.shape)} vs {tuple(y.shape)}")
    p_true = torch.where(y, p, 1.0 - p).clamp(eps, 1.0 - eps)
    w_bg, w_fg = class_weights
    w = torch.where(y, torch.as_tensor(w_fg, dtype=p_true.dtype),
                    torch.as_tensor(w_bg, dtype=p_true.dtype))
    return -(w * torch.log(p_true)).mean()


def batch_class_weights(masks, clip: tuple[float, float] = (0.1, 10.0)) -> tuple[float, float]:
    """Inverse class frequency over a batch of binary masks, normalized so a
    balanced batch yields (1, 1), then clipped."""
    y = np.asarray(masks, dtype=bool)
    total = y.size
    n_fg = int(y.sum())
    lo, hi = clip
    ws = []
    for count in (total - n_fg, n_fg):
        if count == 0:
            ws.append(hi)  # no pixels of this class in the batch
        else:
            ws.append(float(np.clip(total / (2.0 * count), lo, hi)))
    return ws[0], ws[1]


def segment(model: SegmenterModel, image) -> SegmentationResult:
    """Foreground probability, thresholded mask, and chaining bbox."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"segment expects a 2D image, got {arr.shape}")
    if arr.shape != (model.patch_size, model.patch_size):
        raise ShapeError(
            f"expected {model.patch_size}x{model.patch_size} input, got {arr.shape}"
        )
    was_training = model.training
    model.eval()
    with torch.no_grad():
        prob = model.proba(torch.from_numpy(arr)[None, None])[0, 1].numpy()
    if was_training:
        model.train()
    mask = prob >= model.threshold
    return SegmentationResult(prob, mask, mask_to_bbox(mask, model.bbox_margin))


@dataclass
class SegTrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    class_weights: Optional[tuple[float, float]] = None  # None: per-batch inverse frequency
    weight_clip: tuple = (0.1, 10.0)
    seed: int = 0
    deterministic: bool = True
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    record_steps: bool = False
    max_steps: Optional[int] = None


@dataclass
class SegTrainHistory:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def train_segmenter(model: SegmenterModel, images, masks, config: SegTrainConfig) -> SegTrainHistory:
    """Adam training on (image, binary mask) pairs with weighted cross
    entropy; callers supply crops already derived from ground-truth boxes."""
    imgs = np.asarray(images, dtype=np.float32)
    ys = np.asarray(masks)
    if imgs.ndim == 2:
        imgs, ys = imgs[None], ys[None]
    if imgs.shape[0] == 0:
        raise ValueError("empty dataset")
    if imgs.shape != ys.shape:
        raise ShapeError(f"images/masks shapes differ: {imgs.shape} vs {ys.shape}")
    x = torch.from_numpy(imgs).unsqueeze(1)
    y = torch.from_numpy(np.asarray(ys, dtype=bool))

    shuffle_rng = np.random.default_rng([config.seed, zlib.crc32(b"batch-shuffle")])
    torch.manual_seed(derive_seed(config.seed, "train-loop"))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)

    n = x.shape[0]
    bs = min(config.batch_size, n)
    history = SegTrainHistory()
    log_fh = open(config.log_path, "a") if config.log_path else None
    model.train()
    step_count = 0
    try:
        for epoch in range(model.epoch, config.epochs):
            order = shuffle_rng.permutation(n)
            total, batches = 0.0, 0
            for start in range(0, n - bs + 1, bs):
                idx = order[start : start + bs]
                xb, yb = x[idx], y[idx]
                weights = config.class_weights or batch_class_weights(
                    yb.numpy(), config.weight_clip
                )
                prob = model.proba(xb)[:, 1]
                loss = weighted_cross_entropy(prob, yb, weights)
                opt.zero_grad()
                loss.backward()
                opt.step()
                val = float(loss.detach())
                if not math.isfinite(val):
                    _diagnostics_checkpoint(model, config, epoch)
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {val}")
                total += val
                batches += 1
                step_count += 1
                if config.record_steps:
                    history.steps.append({"step": step_count, "seg": val})
                if config.max_steps is not None and step_count >= config.max_steps:
                    break
            record = {
                "epoch": epoch,
                "adv_s": None,
                "adv_t": None,
                "cyc_s": None,
                "cyc_t": None,
                "seg": total / max(batches, 1),
                "mode": "segmentation",
            }
            history.epochs.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            model.epoch = epoch + 1
            if config.max_steps is not None and step_count >= config.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    if config.checkpoint_dir:
        from .checkpoint import save_segmenter

        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_segmenter(Path(config.checkpoint_dir) / "segmenter_final.ckpt", model)
    return history


def _diagnostics_checkpoint(model, config, epoch):
    if not config.checkpoint_dir:
        return
    try:
        from .checkpoint import save_segmenter

        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_segmenter(Path(config.checkpoint_dir) / "segmenter_diverged.ckpt", model)
    except Exception:
        pass
