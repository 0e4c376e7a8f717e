"""Cascade orchestration: per-stage synthesis + segmentation under the
two-stage or end-to-end strategy, nested-crop chaining, and final label
composition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data_io import (
    LabeledSlice,
    _extract_window,
    compute_crop_window,
    crop_to_bbox,
)
from .htc_target import TargetDistribution, build_htc_target
from .metrics import MetricsReport, evaluate_stage
from .segmentation import (
    SegmentationResult,
    SegmenterModel,
    SegTrainConfig,
    SegTrainHistory,
    batch_class_weights,
    mask_to_bbox,
    segment,
    train_segmenter,
    weighted_cross_entropy,
)
from .synthesis import (
    LossWeights,
    SynthesisModel,
    SynthesisTrainConfig,
    TrainHistory,
    derive_seed,
    synthesize,
    train_synthesis,
)

STRATEGIES = ("TWO_STAGE", "END_TO_END")


def total_loss(seg_loss, synth_loss, segmentation_weight: float):
    """Joint objective: segmentation_weight * seg_loss + synth_loss."""
    return segmentation_weight * seg_loss + synth_loss


@dataclass
class StageConfig:
    """Everything one cascade stage needs; JSON field names match the
    attribute names exactly."""

    stage_index: int
    foreground_labels: list
    source_modality: str = "phantom"
    patch_size: int = 64
    target_distribution: TargetDistribution = field(
        default_factory=TargetDistribution.binary
    )
    loss_weights: LossWeights = field(
        default_factory=lambda: LossWeights(segmentation=1.0)
    )
    strategy: str = "TWO_STAGE"
    epochs: int = 30
    switch_epoch: int = 10
    seed: int = 0
    # knobs the source material leaves open
    batch_size: int = 16
    lr: float = 1e-4
    attn_lr_scale: float = 1.0
    seg_epochs: Optional[int] = None
    seg_batch_size: int = 8
    bbox_margin: int = 8
    joint_mode: str = "summed"  # "alternating" keeps seg grads out of synthesis
    record_steps: bool = False  # keep per-step loss values in the history
    model_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.joint_mode not in ("summed", "alternating"):
            raise ValueError("joint_mode must be 'summed' or 'alternating'")
        if not self.foreground_labels:
            raise ValueError("foreground_labels must be nonempty")
        self.foreground_labels = sorted(int(v) for v in self.foreground_labels)
        if self.patch_size < 16:
            raise ValueError("patch_size must be >= 16")

    def to_json(self) -> dict:
        return {
            "stage_index": self.stage_index,
            "foreground_labels": self.foreground_labels,
            "source_modality": self.source_modality,
            "patch_size": self.patch_size,
            "target_distribution": self.target_distribution.to_json(),
            "loss_weights": self.loss_weights.to_json(),
            "strategy": self.strategy,
            "epochs": self.epochs,
            "switch_epoch": self.switch_epoch,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "attn_lr_scale": self.attn_lr_scale,
            "seg_epochs": self.seg_epochs,
            "seg_batch_size": self.seg_batch_size,
            "bbox_margin": self.bbox_margin,
            "joint_mode": self.joint_mode,
            "record_steps": self.record_steps,
            "model_params": self.model_params,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StageConfig":
        d = dict(obj)
        if "target_distribution" in d:
            d["target_distribution"] = TargetDistribution.from_json(
                d["target_distribution"]
            )
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights.from_json(d["loss_weights"])
        return cls(**d)


def validate_cascade(configs: Sequence[StageConfig]) -> None:
    """Patch sizes must not grow and foreground sets must nest strictly."""
    if not configs:
        raise ValueError("cascade needs at least one stage")
    for prev, nxt in zip(configs, configs[1:]):
        if nxt.patch_size > prev.patch_size:
            raise ValueError(
                f"patch sizes must be non-increasing: {prev.patch_size} -> {nxt.patch_size}"
            )
        if not set(nxt.foreground_labels) < set(prev.foreground_labels):
            raise ValueError(
                f"stage {nxt.stage_index} foreground {nxt.foreground_labels} must be "
                f"strictly nested in {prev.foreground_labels}"
            )


@dataclass
class StageModels:
    """Trained pieces of one stage; `predict` is the whole per-crop path."""

    synthesis: Optional[SynthesisModel]
    segmenter: Optional[SegmenterModel]
    patch_size: int

    def predict(self, image: np.ndarray):
        """(synthetic image, attention map or None, SegmentationResult)."""
        if self.synthesis is not None:
            syn, att = synthesize(self.synthesis, image)
        else:
            syn, att = np.asarray(image, dtype=np.float32), None
        return syn, att, segment(self.segmenter, syn)


@dataclass
class StageResult:
    stage_index: int
    skipped: bool = False
    synthesis_history: Optional[TrainHistory] = None
    segmentation_history: Optional[SegTrainHistory] = None
    checkpoints: dict = field(default_factory=dict)
    report: Optional[MetricsReport] = None


@dataclass
class CascadeResult:
    """One input slice through the whole cascade."""

    final_labels: np.ndarray  # 0 = normal, k = deepest stage containing pixel
    stage_results: list  # SegmentationResult or None per stage
    artifacts: list = field(default_factory=list)  # per-stage dicts for montage


def _binary_masks(slices: Sequence[LabeledSlice], fg_labels) -> np.ndarray:
    return np.stack([np.isin(s.labels, fg_labels) for s in slices])


def _stage_targets(slices, fg_labels, dist: TargetDistribution, seed: int) -> np.ndarray:
    """Unpaired HTC targets: each drawn from another slice's binarized
    labels, deterministic in the stage seed."""
    n = len(slices)
    shift = max(1, n // 2)
    out = []
    for i in range(n):
        lbl = np.isin(slices[(i + shift) % n].labels, fg_labels).astype(np.int32)
        out.append(build_htc_target(lbl, dist, derive_seed(seed, f"target-{i}")))
    return np.stack(out)


def _paired_targets(slices, fg_labels, dist, seed) -> np.ndarray:
    """Ideal target for each slice's own labels, for paired evaluation."""
    out = []
    for i, s in enumerate(slices):
        lbl = np.isin(s.labels, fg_labels).astype(np.int32)
        out.append(build_htc_target(lbl, dist, derive_seed(seed, f"val-target-{i}")))
    return np.stack(out)


def _build_synthesis(stage: StageConfig) -> SynthesisModel:
    mp = stage.model_params
    return SynthesisModel(
        patch_size=stage.patch_size,
        base_channels=mp.get("synth_base", 64),
        num_res_blocks=mp.get("res_blocks"),
        attn_channels=mp.get("attn_base", 32),
        disc_channels=mp.get("disc_base", 64),
        disc_layers=mp.get("disc_layers", 3),
    )


def _build_segmenter(stage: StageConfig) -> SegmenterModel:
    mp = stage.model_params
    return SegmenterModel(
        patch_size=stage.patch_size,
        base_channels=mp.get("seg_base", 48),
        growth=mp.get("seg_growth", 12),
        layers_per_block=mp.get("seg_layers", 4),
        num_pools=mp.get("seg_pools"),
        dropout=mp.get("dropout", 0.2),
        threshold=mp.get("threshold", 0.5),
        bbox_margin=stage.bbox_margin,
    )


class _JointSegFeedback:
    """Segmentation hook for end-to-end training; owns the segmenter's
    optimizer. In alternating mode the synthetic batch is detached, so the
    synthesis nets receive no segmentation gradient."""

    def __init__(self, segmenter, masks: np.ndarray, stage: StageConfig):
        self.segmenter = segmenter
        self.masks = torch.from_numpy(np.asarray(masks, dtype=bool))
        self.detach = stage.joint_mode == "alternating"
        self.opt = torch.optim.Adam(segmenter.parameters(), lr=stage.lr)

    def zero_grad(self):
        self.opt.zero_grad()

    def loss(self, synthetic, indices):
        x = synthetic.detach() if self.detach else synthetic
        yb = self.masks[np.asarray(indices)]
        weights = batch_class_weights(yb.numpy())
        prob = self.segmenter.proba(x)[:, 1]
        return weighted_cross_entropy(prob, yb, weights)

    def step(self):
        self.opt.step()


def _synthesize_all(model, images: np.ndarray, batch: int = 32) -> np.ndarray:
    outs = []
    for start in range(0, images.shape[0], batch):
        syn, _ = synthesize(model, images[start : start + batch])
        outs.append(syn)
    return np.concatenate(outs)


def run_stage(
    stage: StageConfig,
    train_slices: Sequence[LabeledSlice],
    val_slices: Sequence[LabeledSlice] = (),
    out_dir: Optional[str] = None,
) -> tuple[StageModels, StageResult]:
    """Train one stage; callers supply data already cropped for it.

    TWO_STAGE freezes the synthesis model before the segmenter trains on
    its outputs. END_TO_END attaches the segmentation feedback hook so the
    joint objective (total_loss) drives the synthesis networks too.
    """
    train_slices = list(train_slices)
    if not train_slices:
        return (
            StageModels(None, None, stage.patch_size),
            StageResult(stage.stage_index, skipped=True),
        )
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    prefix = f"stage{stage.stage_index}"
    fg = stage.foreground_labels

    imgs = np.stack([s.image for s in train_slices])
    masks = _binary_masks(train_slices, fg)
    targets = _stage_targets(train_slices, fg, stage.target_distribution, stage.seed)

    torch.manual_seed(derive_seed(stage.seed, "synthesis-init"))
    synth_model = _build_synthesis(stage)
    torch.manual_seed(derive_seed(stage.seed, "segmenter-init"))
    seg_model = _build_segmenter(stage)

    synth_cfg = SynthesisTrainConfig(
        epochs=stage.epochs,
        switch_epoch=stage.switch_epoch,
        batch_size=stage.batch_size,
        lr=stage.lr,
        attn_lr_scale=stage.attn_lr_scale,
        weights=stage.loss_weights,
        seed=stage.seed,
        log_path=str(out / f"{prefix}_synthesis_log.jsonl") if out else None,
        record_steps=stage.record_steps,
    )
    checkpoints = {}
    seg_history: Optional[SegTrainHistory] = None

    if stage.strategy == "TWO_STAGE":
        synth_history = train_synthesis(synth_model, imgs, targets, synth_cfg)
        if out:
            from .checkpoint import save_synthesis

            path = out / f"{prefix}_synthesis.ckpt"
            save_synthesis(path, synth_model)
            checkpoints["synthesis"] = str(path)
        synth_model.eval()
        synthetic = _synthesize_all(synth_model, imgs)
        seg_cfg = SegTrainConfig(
            epochs=stage.seg_epochs or stage.epochs,
            batch_size=stage.seg_batch_size,
            lr=stage.lr,
            seed=stage.seed,
            log_path=str(out / f"{prefix}_seg_log.jsonl") if out else None,
        )
        seg_history = train_segmenter(seg_model, synthetic, masks, seg_cfg)
    else:  # END_TO_END
        feedback = _JointSegFeedback(seg_model, masks, stage)
        synth_history = train_synthesis(
            synth_model, imgs, targets, synth_cfg, seg_feedback=feedback
        )
        if out:
            from .checkpoint import save_synthesis

            path = out / f"{prefix}_synthesis.ckpt"
            save_synthesis(path, synth_model)
            checkpoints["synthesis"] = str(path)

    if out:
        from .checkpoint import save_segmenter

        path = out / f"{prefix}_segmenter.ckpt"
        save_segmenter(path, seg_model)
        checkpoints["segmenter"] = str(path)

    models = StageModels(synth_model, seg_model, stage.patch_size)
    report = None
    if val_slices:
        report = _evaluate_stage_models(stage, models, list(val_slices))
        if out:
            report.save(out / f"{prefix}_report.json")
    result = StageResult(
        stage_index=stage.stage_index,
        synthesis_history=synth_history,
        segmentation_history=seg_history,
        checkpoints=checkpoints,
        report=report,
    )
    return models, result


def _evaluate_stage_models(stage, models: StageModels, val_slices) -> MetricsReport:
    fg = stage.foreground_labels
    gts = [np.isin(s.labels, fg).astype(np.int32) for s in val_slices]
    imgs = np.stack([s.image for s in val_slices])
    synthetic = (
        _synthesize_all(models.synthesis, imgs) if models.synthesis else imgs
    )
    targets = _paired_targets(val_slices, fg, stage.target_distribution, stage.seed)
    preds = [
        segment(models.segmenter, synthetic[i]).mask.astype(np.int32)
        for i in range(len(val_slices))
    ]
    return evaluate_stage(
        preds,
        gts,
        synthetic_images=list(synthetic),
        target_images=list(targets),
        labels=gts,
        spacing=val_slices[0].spacing,
        region_names={0: "normal", 1: f"stage{stage.stage_index}"},
        config={"stage": stage.to_json()},
    )


def _crop_set(slices, prev_fg, patch: int, margin: int):
    """Stage k+1 training crops: ground-truth box of the previous stage's
    foreground, skipping slices without it."""
    kept = []
    for s in slices:
        box = mask_to_bbox(np.isin(s.labels, prev_fg))
        if box is None:
            continue
        kept.append(crop_to_bbox(s, box, patch, margin=margin))
    return kept


def prepare_stage_data(
    configs: Sequence[StageConfig], stage_index: int, slices: Sequence[LabeledSlice]
):
    """Crop slices for one stage by chaining ground-truth boxes of every
    earlier stage (training-time rule)."""
    cur = list(slices)
    for k in range(1, stage_index):
        cur = _crop_set(
            cur,
            configs[k - 1].foreground_labels,
            configs[k].patch_size,
            configs[k].bbox_margin,
        )
    return cur


def train_cascade(
    configs: Sequence[StageConfig],
    train_slices: Sequence[LabeledSlice],
    val_slices: Sequence[LabeledSlice] = (),
    out_dir: Optional[str] = None,
) -> tuple[list[StageModels], list[StageResult]]:
    """Train every stage in order; deeper stages train on ground-truth
    crops of the previous stage's region."""
    validate_cascade(configs)
    models, results = [], []
    cur_train, cur_val = list(train_slices), list(val_slices)
    for k, stage in enumerate(configs):
        if k > 0:
            prev = configs[k - 1]
            cur_train = _crop_set(
                cur_train, prev.foreground_labels, stage.patch_size, stage.bbox_margin
            )
            cur_val = _crop_set(
                cur_val, prev.foreground_labels, stage.patch_size, stage.bbox_margin
            )
        sm, res = run_stage(stage, cur_train, cur_val, out_dir)
        models.append(sm)
        results.append(res)
    return models, results


def _place_mask(local_mask: np.ndarray, origin, global_shape) -> np.ndarray:
    out = np.zeros(global_shape, dtype=bool)
    r0, c0 = origin
    src_r = slice(max(0, -r0), min(local_mask.shape[0], global_shape[0] - r0))
    src_c = slice(max(0, -c0), min(local_mask.shape[1], global_shape[1] - c0))
    if src_r.start >= src_r.stop or src_c.start >= src_c.stop:
        return out
    out[src_r.start + r0 : src_r.stop + r0, src_c.start + c0 : src_c.stop + c0] = (
        local_mask[src_r, src_c]
    )
    return out


def cascade_infer(models: Sequence[StageModels], image) -> CascadeResult:
    """Run one slice through the cascade with predicted (not ground-truth)
    bounding boxes chaining the stages.

    The final map gives each pixel the deepest stage containing it; the
    chained intersection makes nesting hold by construction.
    """
    img = np.asarray(image, dtype=np.float32)
    global_shape = img.shape
    final = np.zeros(global_shape, dtype=np.int32)
    region = np.ones(global_shape, dtype=bool)
    stage_results: list = []
    artifacts: list = []
    frame = img
    origin = (0, 0)
    for k, sm in enumerate(models):
        if sm is None or sm.segmenter is None:
            # an untrained stage ends the chain; deeper crops are undefined
            stage_results.extend([None] * (len(models) - k))
            break
        syn, att, res = sm.predict(frame)
        stage_results.append(res)
        artifacts.append(
            {"source": frame, "synthetic": syn, "attention": att, "mask": res.mask}
        )
        region = region & _place_mask(res.mask, origin, global_shape)
        final += region.astype(np.int32)
        if k + 1 == len(models):
            break
        if res.bbox is None or not region.any():
            stage_results.extend([None] * (len(models) - k - 1))
            break
        win = compute_crop_window(
            frame.shape, res.bbox, models[k + 1].patch_size, margin=0
        )
        frame = _extract_window(frame, win)
        origin = (origin[0] + win.row0, origin[1] + win.col0)
    return CascadeResult(final_labels=final, stage_results=stage_results, artifacts=artifacts)


def cascade_predict(models, images) -> list[CascadeResult]:
    return [cascade_infer(models, img) for img in images]


@dataclass
class ExperimentConfig:
    """Top-level experiment file: {seed, stages, data, output_dir}."""

    seed: int
    stages: list
    data: dict
    output_dir: str

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "stages": [s.to_json() for s in self.stages],
            "data": self.data,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        stages = [StageConfig.from_json(s) for s in obj["stages"]]
        return cls(
            seed=int(obj.get("seed", 0)),
            stages=stages,
            data=dict(obj.get("data", {})),
            output_dir=obj.get("output_dir", "runs/experiment"),
        )


def load_experiment(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(json.loads(Path(path).read_text()))
