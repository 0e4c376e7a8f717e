"""Attention-guided unpaired synthesis: composition, losses, and the
two-phase adversarial training loop."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError, TrainingDivergedError
from .networks import AttentionNet, Generator, PatchDiscriminator

EPS = 1e-7  # probability clamp for the log terms


def derive_seed(seed: int, tag: str) -> int:
    """Independent integer seed for one purpose, stable across runs."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


@dataclass
class LossWeights:
    """Nonnegative weights for the four synthesis terms plus the optional
    segmentation feedback term."""

    adv_source: float = 1.0
    cycle_source: float = 10.0
    adv_target: float = 1.0
    cycle_target: float = 10.0
    segmentation: float = 0.0

    def __post_init__(self):
        vals = (
            self.adv_source,
            self.cycle_source,
            self.adv_target,
            self.cycle_target,
            self.segmentation,
        )
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if all(v == 0 for v in vals):
            raise ValueError("loss weights must not all be zero")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class SynthLossBreakdown:
    adv_s: float
    cyc_s: float
    adv_t: float
    cyc_t: float
    seg: Optional[float] = None


class SynthesisModel(nn.Module):
    """Both translation directions with their attention nets and patch
    discriminators. `epoch` tracks how far training got."""

    def __init__(
        self,
        patch_size: int = 64,
        in_channels: int = 1,
        base_channels: int = 64,
        num_res_blocks: int | None = None,
        attn_channels: int = 32,
        disc_channels: int = 64,
        disc_layers: int = 3,
    ):
        super().__init__()
        if num_res_blocks is None:
            num_res_blocks = 6 if patch_size >= 128 else 4
        self.patch_size = patch_size
        self.epoch = 0
        self.hparams = {
            "patch_size": patch_size,
            "in_channels": in_channels,
            "base_channels": base_channels,
            "num_res_blocks": num_res_blocks,
            "attn_channels": attn_channels,
            "disc_channels": disc_channels,
            "disc_layers": disc_layers,
        }
        self.gen_source_to_target = Generator(in_channels, base_channels, num_res_blocks)
        self.gen_target_to_source = Generator(in_channels, base_channels, num_res_blocks)
        self.attn_source = AttentionNet(in_channels, attn_channels)
        self.attn_target = AttentionNet(in_channels, attn_channels)
        self.disc_source = PatchDiscriminator(in_channels, disc_channels, disc_layers)
        self.disc_target = PatchDiscriminator(in_channels, disc_channels, disc_layers)

    def generator_parameters(self):
        for m in (self.gen_source_to_target, self.gen_target_to_source,
                  self.attn_source, self.attn_target):
            yield from m.parameters()


def compose_translation(image, attention, generated):
    """Attention-gated blend: attention * generated + (1 - attention) * image.

    Computed as a two-sided lerp (anchored at the image below attention
    0.5 and at the generated side above) so the three boundary cases --
    attention 0, attention 1, and generated == image -- hold bit-exactly.
    Works on torch tensors and numpy arrays alike; all three arguments
    must share a shape (a singleton channel broadcast is allowed).
    """
    for other in (attention, generated):
        try:
            np.broadcast_shapes(tuple(image.shape), tuple(other.shape))
        except ValueError:
            raise ShapeError(
                f"compose_translation shapes differ: {tuple(image.shape)} vs {tuple(other.shape)}"
            ) from None
    span = generated - image
    from_image = image + attention * span
    from_generated = generated - (1.0 - attention) * span
    if any(torch.is_tensor(x) for x in (image, attention, generated)):
        return torch.where(torch.as_tensor(attention) < 0.5, from_image, from_generated)
    return np.where(attention < 0.5, from_image, from_generated)


def adversarial_loss(d_real, d_fake, eps: float = EPS):
    """Minimax value: mean log d_real + mean log(1 - d_fake), probabilities
    clamped to [eps, 1-eps]. Discriminators ascend it; it is also the
    adversarial value reported in training records."""
    r = torch.as_tensor(d_real).clamp(eps, 1.0 - eps)
    f = torch.as_tensor(d_fake).clamp(eps, 1.0 - eps)
    return torch.log(r).mean() + torch.log1p(-f).mean()


def least_squares_adversarial_loss(d_real, d_fake):
    """LSGAN analogue behind the config flag; same sign convention."""
    r = torch.as_tensor(d_real)
    f = torch.as_tensor(d_fake)
    return -(((r - 1.0) ** 2).mean() + (f**2).mean())


def cycle_loss(original, reconstructed):
    """Mean absolute difference per pixel."""
    if tuple(original.shape) != tuple(reconstructed.shape):
        raise ShapeError(
            f"cycle_loss shapes differ: {tuple(original.shape)} vs {tuple(reconstructed.shape)}"
        )
    return (torch.as_tensor(original) - torch.as_tensor(reconstructed)).abs().mean()


def synthesis_loss(breakdown: SynthLossBreakdown, w: LossWeights):
    """Weighted sum of the four synthesis terms (segmentation excluded)."""
    return (
        w.adv_source * breakdown.adv_s
        + w.cycle_source * breakdown.cyc_s
        + w.adv_target * breakdown.adv_t
        + w.cycle_target * breakdown.cyc_t
    )


class SegFeedback(Protocol):
    """Joint-training hook: contributes a segmentation loss on the synthetic
    batch and owns its own optimizer."""

    def zero_grad(self) -> None: ...

    def loss(self, synthetic: torch.Tensor, indices: np.ndarray) -> torch.Tensor: ...

    def step(self) -> None: ...


@dataclass
class SynthesisTrainConfig:
    epochs: int = 180
    switch_epoch: int = 25
    batch_size: int = 16
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    # two time-scale update: attention nets step at lr * attn_lr_scale so they
    # are only moderately trained when the masked phase freezes them
    attn_lr_scale: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    adversarial: str = "minimax"  # or "least_squares"
    seed: int = 0
    deterministic: bool = True
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 0  # 0: final only
    record_steps: bool = False
    max_steps: Optional[int] = None  # cap for equivalence checks


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def _as_batched(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got {arr.shape}")
    return torch.from_numpy(arr).unsqueeze(1)


def _adv_fn(name: str) -> Callable:
    if name == "least_squares":
        return least_squares_adversarial_loss
    if name == "minimax":
        return adversarial_loss
    raise ValueError(f"unknown adversarial mode {name!r}")


def _gen_adv_fn(name: str) -> Callable:
    """Generator-side adversarial estimate. Descending the value function's
    fake term stalls once a discriminator pulls ahead (the gradient scales
    with d_fake), so the generator step flips the fake-term labels instead:
    same fixed point, usable gradient when d_fake is near 0."""
    if name == "least_squares":
        return lambda d_fake: ((torch.as_tensor(d_fake) - 1.0) ** 2).mean()
    if name == "minimax":
        return lambda d_fake: -torch.log(
            torch.as_tensor(d_fake).clamp(EPS, 1.0 - EPS)
        ).mean()
    raise ValueError(f"unknown adversarial mode {name!r}")


def train_synthesis(
    model: SynthesisModel,
    sources,
    targets,
    config: SynthesisTrainConfig,
    seg_feedback: Optional[SegFeedback] = None,
) -> TrainHistory:
    """Run the two-phase adversarial game.

    Phase 1 (epoch < switch_epoch): discriminators see whole images and the
    attention nets train alongside the generators. Phase 2: both the real
    and the generated discriminator inputs are multiplied by the attention
    map that belongs to them, and the attention nets are frozen. The masked
    game has a degenerate optimum where the attended region simply vanishes
    (both products go to zero and the discriminators are left comparing
    noise), so attention is held at its phase-1 state once the switch
    happens. Generators minimize the weighted synthesis loss (plus the
    segmentation term when a feedback hook is attached and its weight is
    positive), with the adversarial entries taken in their label-flipped
    generator form; each discriminator ascends its own adversarial term.
    Logged adv values always report the discriminator's value function.
    """
    src = _as_batched(sources)
    tgt = _as_batched(targets)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("empty dataset")
    w = config.weights
    adv = _adv_fn(config.adversarial)
    gen_adv = _gen_adv_fn(config.adversarial)
    use_seg = seg_feedback is not None and w.segmentation > 0

    shuffle_rng = np.random.default_rng([config.seed, zlib.crc32(b"batch-shuffle")])
    torch.manual_seed(derive_seed(config.seed, "train-loop"))

    g_opt = torch.optim.Adam(
        [
            {"params": list(model.gen_source_to_target.parameters())
             + list(model.gen_target_to_source.parameters())},
            {"params": list(model.attn_source.parameters())
             + list(model.attn_target.parameters()),
             "lr": config.lr * config.attn_lr_scale},
        ],
        lr=config.lr,
        betas=config.betas,
    )
    ds_opt = torch.optim.Adam(model.disc_source.parameters(), lr=config.lr, betas=config.betas)
    dt_opt = torch.optim.Adam(model.disc_target.parameters(), lr=config.lr, betas=config.betas)

    n_src, n_tgt = src.shape[0], tgt.shape[0]
    bs = min(config.batch_size, n_src)
    history = TrainHistory()
    log_fh = open(config.log_path, "a") if config.log_path else None
    model.train()
    step_count = 0
    try:
        for epoch in range(model.epoch, config.epochs):
            masked = epoch >= config.switch_epoch
            model.attn_source.requires_grad_(not masked)
            model.attn_target.requires_grad_(not masked)
            order = shuffle_rng.permutation(n_src)
            sums = {"adv_s": 0.0, "adv_t": 0.0, "cyc_s": 0.0, "cyc_t": 0.0, "seg": 0.0}
            batches = 0
            for start in range(0, n_src - bs + 1, bs):
                idx = order[start : start + bs]
                t_idx = shuffle_rng.integers(0, n_tgt, size=bs)
                s = src[idx]
                t = tgt[t_idx]

                # forward path s -> s' -> s''
                s_a = model.attn_source(s)
                s_prime = compose_translation(s, s_a, model.gen_source_to_target(s))
                t_a_sp = model.attn_target(s_prime)
                s_second = compose_translation(
                    s_prime, t_a_sp, model.gen_target_to_source(s_prime)
                )
                # backward path t -> t' -> t''
                t_a = model.attn_target(t)
                t_prime = compose_translation(t, t_a, model.gen_target_to_source(t))
                s_a_tp = model.attn_source(t_prime)
                t_second = compose_translation(
                    t_prime, s_a_tp, model.gen_source_to_target(t_prime)
                )

                if masked:
                    fake_t_in, real_t_in = s_prime * s_a, t * t_a
                    fake_s_in, real_s_in = t_prime * t_a, s * s_a
                else:
                    fake_t_in, real_t_in = s_prime, t
                    fake_s_in, real_s_in = t_prime, s

                # generator/attention step; the real score is a constant here
                with torch.no_grad():
                    d_real_t = model.disc_target(real_t_in)
                    d_real_s = model.disc_source(real_s_in)
                d_fake_t = model.disc_target(fake_t_in)
                d_fake_s = model.disc_source(fake_s_in)
                cyc_s = cycle_loss(s, s_second)
                cyc_t = cycle_loss(t, t_second)
                g_loss = synthesis_loss(
                    SynthLossBreakdown(gen_adv(d_fake_t), cyc_s, gen_adv(d_fake_s), cyc_t), w
                )
                # reported terms stay on the shared value function
                adv_s = adv(d_real_t, d_fake_t.detach())
                adv_t = adv(d_real_s, d_fake_s.detach())
                seg_val = None
                if use_seg:
                    seg_term = seg_feedback.loss(s_prime, idx)
                    seg_val = float(seg_term.detach())
                    g_loss = g_loss + w.segmentation * seg_term
                    seg_feedback.zero_grad()
                g_opt.zero_grad()
                g_loss.backward()
                g_opt.step()
                if use_seg:
                    seg_feedback.step()

                # discriminator steps ascend the minimax value
                dt_opt.zero_grad()
                (-adv(model.disc_target(real_t_in.detach()),
                      model.disc_target(fake_t_in.detach()))).backward()
                dt_opt.step()
                ds_opt.zero_grad()
                (-adv(model.disc_source(real_s_in.detach()),
                      model.disc_source(fake_s_in.detach()))).backward()
                ds_opt.step()

                vals = {
                    "adv_s": float(adv_s.detach()),
                    "adv_t": float(adv_t.detach()),
                    "cyc_s": float(cyc_s.detach()),
                    "cyc_t": float(cyc_t.detach()),
                    "seg": seg_val if seg_val is not None else 0.0,
                }
                if not all(math.isfinite(v) for v in vals.values()):
                    _diagnostics_checkpoint(model, config, epoch)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}: {vals}"
                    )
                for k in sums:
                    sums[k] += vals[k]
                batches += 1
                step_count += 1
                if config.record_steps:
                    history.steps.append(
                        {"step": step_count, "mode": "masked" if masked else "whole", **vals}
                    )
                if config.max_steps is not None and step_count >= config.max_steps:
                    break

            record = {
                "epoch": epoch,
                "adv_s": sums["adv_s"] / max(batches, 1),
                "adv_t": sums["adv_t"] / max(batches, 1),
                "cyc_s": sums["cyc_s"] / max(batches, 1),
                "cyc_t": sums["cyc_t"] / max(batches, 1),
                "seg": (sums["seg"] / max(batches, 1)) if use_seg else None,
                "mode": "masked" if masked else "whole",
            }
            history.epochs.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            model.epoch = epoch + 1
            if (
                config.checkpoint_dir
                and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0
            ):
                _periodic_checkpoint(model, config, epoch + 1)
            if config.max_steps is not None and step_count >= config.max_steps:
                break
    finally:
        model.attn_source.requires_grad_(True)
        model.attn_target.requires_grad_(True)
        if log_fh:
            log_fh.close()
    if config.checkpoint_dir:
        from .checkpoint import save_synthesis

        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_synthesis(Path(config.checkpoint_dir) / "synthesis_final.ckpt", model)
    return history


def _periodic_checkpoint(model, config, epoch):
    from .checkpoint import save_synthesis

    Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    save_synthesis(Path(config.checkpoint_dir) / f"synthesis_ep{epoch:04d}.ckpt", model)


def _diagnostics_checkpoint(model, config, epoch):
    if not config.checkpoint_dir:
        return
    try:
        from .checkpoint import save_synthesis

        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_synthesis(Path(config.checkpoint_dir) / "synthesis_diverged.ckpt", model)
    except Exception:
        pass  # diagnostics only, never mask the original failure


def _check_patch(model: SynthesisModel, batch: torch.Tensor) -> None:
    if batch.shape[-1] != model.patch_size or batch.shape[-2] != model.patch_size:
        raise ShapeError(
            f"expected {model.patch_size}x{model.patch_size} input, got {tuple(batch.shape[-2:])}"
        )


def synthesize(model: SynthesisModel, images, hard_threshold: float | None = None):
    """Translate source images to the target contrast.

    Returns (synthetic, attention) as numpy arrays matching the input
    batch shape. Pure with respect to model state.
    """
    single = np.asarray(images).ndim == 2
    batch = _as_batched(images)
    _check_patch(model, batch)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        a = model.attn_source(batch)
        if hard_threshold is not None:
            a = (a >= hard_threshold).float()
        out = compose_translation(batch, a, model.gen_source_to_target(batch))
        out = out.clamp(0.0, 1.0)
    if was_training:
        model.train()
    syn = out.squeeze(1).numpy()
    att = a.squeeze(1).numpy()
    return (syn[0], att[0]) if single else (syn, att)


def reconstruct(model: SynthesisModel, images, hard_threshold: float | None = None):
    """Map synthetic target-contrast images back to the source contrast."""
    single = np.asarray(images).ndim == 2
    batch = _as_batched(images)
    _check_patch(model, batch)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        a = model.attn_target(batch)
        if hard_threshold is not None:
            a = (a >= hard_threshold).float()
        out = compose_translation(batch, a, model.gen_target_to_source(batch))
        out = out.clamp(0.0, 1.0)
    if was_training:
        model.train()
    rec = out.squeeze(1).numpy()
    att = a.squeeze(1).numpy()
    return (rec[0], att[0]) if single else (rec, att)
