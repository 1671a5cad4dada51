"""Patch-level discriminators.

Fully convolutional stacks that emit one real/fake logit per receptive
field patch. D1 judges low-resolution full translations with the standard
70x70-receptive-field depth (3 stride-2 layers); D2 judges small
high-resolution key regions with a shallower 2-stride-layer stack, since a
64px region cannot absorb a 70px receptive field.
"""

from __future__ import annotations

import torch
from torch import nn


class PatchDiscriminator(nn.Module):
    """n_strided stride-2 conv layers, one stride-1 layer, 1-channel head."""

    def __init__(self, n_strided: int = 3, base_channels: int = 32):
        super().__init__()
        layers = [
            nn.Conv2d(3, base_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = base_channels
        for _ in range(n_strided - 1):
            nxt = min(ch * 2, base_channels * 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        nxt = min(ch * 2, base_channels * 8)
        layers += [
            nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
            nn.InstanceNorm2d(nxt),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(nxt, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        logits = self.net(x)
        return logits[0] if squeeze else logits


def build_discriminators(
    d_layers_low: int = 3, d_layers_high: int = 2, base_channels: int = 32
) -> tuple[PatchDiscriminator, PatchDiscriminator]:
    """(D1 for low-res full images, D2 for high-res regions), disjoint params."""
    d1 = PatchDiscriminator(d_layers_low, base_channels)
    d2 = PatchDiscriminator(d_layers_high, base_channels)
    return d1, d2
