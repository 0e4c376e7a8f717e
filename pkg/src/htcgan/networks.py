"""Network definitions: translation generator, attention net, patch
discriminator, and the densely connected segmenter."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

ATANH_CLIP = 1.0 - 1e-3  # keeps the input skip finite at saturated pixels


def init_weights(module: nn.Module, gain: float = 0.02) -> None:
    """Normal(0, gain) init for conv weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder-decoder translator with residual bottleneck.

    Works on [0, 1] images. The output is tanh(atanh(2x - 1) + r(x))
    mapped back to [0, 1], so a zero-initialized head makes the fresh
    network an identity map up to the atanh clipping.
    """

    def __init__(
        self,
        in_channels: int = 1,
        base_channels: int = 64,
        num_res_blocks: int = 4,
        identity_init: bool = True,
    ):
        super().__init__()
        b = base_channels
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, b, 7),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * b) for _ in range(num_res_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
        )
        self.head = nn.Conv2d(b, in_channels, 7)
        init_weights(self)
        if identity_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        skip = torch.atanh(torch.clamp(2.0 * x - 1.0, -ATANH_CLIP, ATANH_CLIP))
        h = self.encoder(x)
        h = self.blocks(h)
        delta = self.head(self.decoder(h))
        return 0.5 * (torch.tanh(skip + delta) + 1.0)


class AttentionNet(nn.Module):
    """Per-pixel foreground attention in [0, 1].

    Three strided conv layers, one residual block, bilinear upsample back
    to input resolution, then a two-channel softmax; the foreground
    channel is the attention map.
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 32):
        super().__init__()
        b = base_channels
        self.features = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, b, 7),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b),
            nn.ReLU(inplace=True),
            ResidualBlock(4 * b),
        )
        self.head = nn.Conv2d(4 * b, 2, 3, padding=1)
        init_weights(self)

    def class_scores(self, x):
        """Two-channel softmax scores at input resolution (B, 2, H, W)."""
        h = self.features(x)
        h = F.interpolate(h, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return torch.softmax(self.head(h), dim=1)

    def forward(self, x):
        return self.class_scores(x)[:, 1:2]


class PatchDiscriminator(nn.Module):
    """PatchGAN with a sigmoid probability head: (B, 1, h, w) in (0, 1)."""

    def __init__(self, in_channels: int = 1, base_channels: int = 64, num_layers: int = 3):
        super().__init__()
        b = base_channels
        layers = [
            nn.Conv2d(in_channels, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = b
        for i in range(1, num_layers):
            nxt = min(b * 2**i, b * 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        nxt = min(b * 2**num_layers, b * 8)
        layers += [
            nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return torch.sigmoid(self.model(x))


class DenseBlock(nn.Module):
    """Four (by default) BN-ReLU-conv3x3-dropout layers, each fed the
    concatenation of everything before it. Output keeps the input, so
    channels grow by num_layers * growth."""

    def __init__(self, in_channels: int, growth: int = 12, num_layers: int = 4, dropout: float = 0.2):
        super().__init__()
        self.layers = nn.ModuleList()
        ch = in_channels
        for _ in range(num_layers):
            self.layers.append(
                nn.Sequential(
                    nn.BatchNorm2d(ch),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(ch, growth, 3, padding=1),
                    nn.Dropout2d(dropout),
                )
            )
            ch += growth
        self.out_channels = ch
        self.new_channels = ch - in_channels

    def forward(self, x):
        full, new = self.forward_split(x)
        return full

    def forward_split(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return torch.cat(feats, dim=1), torch.cat(feats[1:], dim=1)


class TransitionDown(nn.Module):
    """BN-ReLU-1x1 conv-dropout then 2x2 non-overlapping max pool."""

    def __init__(self, channels: int, dropout: float = 0.2):
        super().__init__()
        self.op = nn.Sequential(
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1),
            nn.Dropout2d(dropout),
            nn.MaxPool2d(2),
        )

    def forward(self, x):
        return self.op(x)


class TransitionUp(nn.Module):
    """3x3 transposed conv, stride 2, applied to the new features only."""

    def __init__(self, channels: int):
        super().__init__()
        self.op = nn.ConvTranspose2d(channels, channels, 3, stride=2, padding=1, output_padding=1)

    def forward(self, x):
        return self.op(x)


class DenseSegmenter(nn.Module):
    """Fully convolutional dense net for binary segmentation (logits out).

    Down path keeps full concatenations as skips; the up path transports
    only each block's new features through the transposed convs, which
    bounds channel growth.
    """

    def __init__(
        self,
        in_channels: int = 1,
        num_classes: int = 2,
        base_channels: int = 48,
        growth: int = 12,
        layers_per_block: int = 4,
        num_pools: int = 2,
        dropout: float = 0.2,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.stem = nn.Conv2d(in_channels, base_channels, 3, padding=1)
        new = growth * layers_per_block

        self.down_blocks = nn.ModuleList()
        self.down_trans = nn.ModuleList()
        skip_channels = []
        ch = base_channels
        for _ in range(num_pools):
            block = DenseBlock(ch, growth, layers_per_block, dropout)
            self.down_blocks.append(block)
            skip_channels.append(block.out_channels)
            self.down_trans.append(TransitionDown(block.out_channels, dropout))
            ch = block.out_channels

        self.bottleneck = DenseBlock(ch, growth, layers_per_block, dropout)

        self.up_trans = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for skip_ch in reversed(skip_channels):
            self.up_trans.append(TransitionUp(new))
            block = DenseBlock(new + skip_ch, growth, layers_per_block, dropout)
            self.up_blocks.append(block)
        self.head = nn.Conv2d(self.up_blocks[-1].out_channels, num_classes, 1)

    def forward(self, x):
        h = self.stem(x)
        skips = []
        for block, trans in zip(self.down_blocks, self.down_trans):
            full = block(h)
            skips.append(full)
            h = trans(full)
        _, new = self.bottleneck.forward_split(h)
        for trans, block, skip in zip(self.up_trans, self.up_blocks, reversed(skips)):
            up = trans(new)
            full, new = block.forward_split(torch.cat([up, skip], dim=1))
        return self.head(full)

    def predict_proba(self, x):
        return torch.softmax(self.forward(x), dim=1)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
