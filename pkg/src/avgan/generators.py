"""Varifocal generator pair.

G1 translates the whole patch at a reduced working resolution and owns the
global appearance (tissue shape, color palette). G2 translates individual
key regions at full resolution and owns local texture. The two share an
architecture skeleton but, by default, no parameters; a varifocal
consistency loss couples their outputs during training.

The encoder half of G1 doubles as the feature extractor for the patchwise
contrastive loss, tapping four depths.
"""

from __future__ import annotations

import torch
from torch import nn


class SpatialAttentionBlock(nn.Module):
    """Lightweight spatial gate: channel-pooled mask multiplied into features."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 7, padding=3)

    def forward(self, x):
        pooled = torch.cat(
            [x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1
        )
        return x * torch.sigmoid(self.conv(pooled))


class BottleneckResBlock(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand with a skip connection."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        mid = max(channels // reduction, 4)
        self.body = nn.Sequential(
            nn.Conv2d(channels, mid, 1),
            nn.InstanceNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, channels, 1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Downsample, spatial attention, residual bottlenecks, upsample.

    Output is squashed to [0, 1]. ``expected_size`` pins the working
    resolution; inputs of any other size are rejected.
    """

    def __init__(
        self,
        base_channels: int = 32,
        n_res_blocks: int = 4,
        expected_size: int | None = None,
    ):
        super().__init__()
        self.expected_size = expected_size
        b = base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, b, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b),
            nn.ReLU(inplace=True),
        )
        self.spatial_attention = SpatialAttentionBlock()
        self.res_blocks = nn.ModuleList(
            [BottleneckResBlock(4 * b) for _ in range(n_res_blocks)]
        )
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(
            nn.Conv2d(b, 3, 7, padding=3, padding_mode="reflect"),
            nn.Sigmoid(),
        )

    def _check(self, x):
        if self.expected_size is not None and (
            x.shape[-1] != self.expected_size or x.shape[-2] != self.expected_size
        ):
            raise ValueError(
                f"expected {self.expected_size}x{self.expected_size} input, "
                f"got {tuple(x.shape[-2:])}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        h = self.down2(self.down1(self.stem(x)))
        h = self.spatial_attention(h)
        for block in self.res_blocks:
            h = block(h)
        out = self.head(self.up(h))
        return out[0] if squeeze else out

    def encode_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps from four encoder depths, for the contrastive loss."""
        self._check(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        f0 = self.stem(x)
        f1 = self.down1(f0)
        f2 = self.down2(f1)
        h = self.spatial_attention(f2)
        mid = max(len(self.res_blocks) // 2, 1)
        for block in self.res_blocks[:mid]:
            h = block(h)
        feats = [f0, f1, f2, h]
        return [f[0] for f in feats] if squeeze else feats


def build_generators(
    base_channels: int = 32,
    n_res_blocks: int = 4,
    lowres_size: int | None = None,
    region_size: int | None = None,
    shared: bool = False,
) -> tuple[Generator, Generator]:
    """Build (G1, G2). With ``shared=True`` both names evaluate one module."""
    g1 = Generator(base_channels, n_res_blocks, expected_size=lowres_size)
    if shared:
        g1.expected_size = None  # one parameter store must accept both sizes
        return g1, g1
    g2 = Generator(base_channels, n_res_blocks, expected_size=region_size)
    return g1, g2
