"""Attention-based key-region selection.

Three independent encoders embed the input patch into query / key / value
feature maps. The attention map between downsampled query and key features
scores how strongly each coarse grid cell interacts with the rest of the
image; cells with high gated importance are selected as key regions and
cropped at full resolution for the high-resolution generator.

The steep sigmoid gate keeps the importance scores differentiable, so the
encoders receive gradients even though the final top-n choice is discrete.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

# Slope of the selection gate. Steep enough to act as a soft threshold
# while keeping a usable gradient near theta.
GATE_GAIN = 1000.0


@dataclass
class QKVEmbedding:
    """Query/key/value feature maps, full (x16 downsampled) and reduced."""

    xq: torch.Tensor
    xk: torch.Tensor
    xv: torch.Tensor
    xq_small: torch.Tensor
    xk_small: torch.Tensor
    xv_small: torch.Tensor

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.xq_small.shape[-2:])


@dataclass
class AttentionState:
    """Attention map and the derived importance vectors for one image."""

    attention: torch.Tensor  # (L, L), rows sum to 1
    importance: torch.Tensor  # (L,) channel-averaged importance P
    gate: torch.Tensor  # (L,) sigmoid gate activations m
    gated_importance: torch.Tensor  # (L,) m * P
    theta: float


@dataclass
class RegionSet:
    """Selected key regions of one image, ordered by descending importance."""

    coords: list[tuple[int, int]]  # top-left corners, full-resolution pixels
    size: int
    regions: list[torch.Tensor]
    grid_indices: list[int]
    source_dims: tuple[int, int] = (0, 0)  # (H, W) of the cropped image


class _Encoder(nn.Module):
    """Four stride-2 convolutions: (3, H, W) -> (out_channels, H/16, W/16)."""

    def __init__(self, out_channels: int):
        super().__init__()
        c = max(out_channels, 8)
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, out_channels, 3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def attention_map(xq: torch.Tensor, xk: torch.Tensor) -> torch.Tensor:
    """Attention map softmax(xq^T xk) over the second dimension.

    Inputs are (C', L) matrices or (C', h, w) maps (flattened internally).
    Each row of the result sums to 1.
    """
    if xq.ndim == 3:
        xq = xq.flatten(1)
    if xk.ndim == 3:
        xk = xk.flatten(1)
    if xq.shape != xk.shape:
        raise ValueError(f"xq {tuple(xq.shape)} and xk {tuple(xk.shape)} must match")
    logits = xq.transpose(0, 1) @ xk
    return torch.softmax(logits, dim=1)


def importance(attention: torch.Tensor, xv: torch.Tensor) -> torch.Tensor:
    """Channel-averaged importance P = mean_C(A @ xv^T), one value per cell."""
    if xv.ndim == 3:
        xv = xv.flatten(1)
    if attention.shape[1] != xv.shape[1]:
        raise ValueError(
            f"attention has {attention.shape[1]} cells but xv has {xv.shape[1]}"
        )
    per_channel = attention @ xv.transpose(0, 1)  # (L, C')
    return per_channel.mean(dim=1)


def gate(p: torch.Tensor, theta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Steep sigmoid gate m = sigmoid(GATE_GAIN * (P - theta)), P' = m * P.

    Differentiable in P; this is the gradient path from region-level losses
    back into the query/key/value encoders.
    """
    m = torch.sigmoid(GATE_GAIN * (p - theta))
    return m, m * p


def top_n_indices(p: torch.Tensor, n: int) -> list[int]:
    """Indices of the n largest entries, descending; ties by lower index."""
    length = p.numel()
    if not 1 <= n <= length:
        raise ValueError(f"n={n} out of range for {length} cells")
    values = p.detach().flatten().tolist()
    order = sorted(range(length), key=lambda i: (-values[i], i))
    return order[:n]


def grid_to_pixel(
    index: int, grid_shape: tuple[int, int], image_dims: tuple[int, int], size: int
) -> tuple[int, int]:
    """Map a grid cell index to the clamped top-left corner of its crop.

    The crop is centered on the cell center ((r + 0.5) * stride) and clamped
    so it lies fully inside the image.
    """
    gh, gw = grid_shape
    h, w = image_dims
    r, c = divmod(index, gw)
    center_r = (r + 0.5) * (h / gh)
    center_c = (c + 0.5) * (w / gw)
    top = int(round(center_r - size / 2))
    left = int(round(center_c - size / 2))
    top = min(max(top, 0), h - size)
    left = min(max(left, 0), w - size)
    return top, left


def select_regions(
    p_gated: torch.Tensor,
    n: int,
    region_size: int,
    image_dims: tuple[int, int],
    grid_shape: tuple[int, int] | None = None,
) -> tuple[list[tuple[int, int]], list[int]]:
    """Pick the n most important grid cells and map them to pixel corners.

    Returns (coords, grid_indices), both ordered by descending gated
    importance with row-major tie-breaks. Selection depends only on the
    ordering of the scores.
    """
    h, w = image_dims
    if region_size > min(h, w):
        raise ValueError(f"region_size {region_size} exceeds image dims {image_dims}")
    length = p_gated.numel()
    if grid_shape is None:
        side = int(math.isqrt(length))
        if side * side != length:
            raise ValueError("grid_shape required for non-square grids")
        grid_shape = (side, side)
    indices = top_n_indices(p_gated, n)
    coords = [grid_to_pixel(i, grid_shape, image_dims, region_size) for i in indices]
    return coords, indices


def crop_regions(
    image: torch.Tensor, coords: list[tuple[int, int]], size: int
) -> list[torch.Tensor]:
    """Crop size x size windows at the given top-left corners.

    Pure index selection, so gradients pass through to the source image.
    """
    h, w = image.shape[-2:]
    crops = []
    for top, left in coords:
        top = min(max(int(top), 0), h - size)
        left = min(max(int(left), 0), w - size)
        crops.append(image[..., top : top + size, left : left + size])
    return crops


def fixed_region_coords(
    image_dims: tuple[int, int], n: int, size: int
) -> list[tuple[int, int]]:
    """Deterministic center-anchored regions for the no-attention baseline.

    n=1: image center; n=2: + top-left quadrant center; n=3: + bottom-right
    quadrant center.
    """
    h, w = image_dims
    anchors = [
        (h // 2, w // 2),
        (h // 4, w // 4),
        (3 * h // 4, 3 * w // 4),
    ]
    if not 1 <= n <= len(anchors):
        raise ValueError(f"fixed mode supports 1..{len(anchors)} regions, got {n}")
    coords = []
    for cr, cc in anchors[:n]:
        top = min(max(cr - size // 2, 0), h - size)
        left = min(max(cc - size // 2, 0), w - size)
        coords.append((top, left))
    return coords


class RegionSelector(nn.Module):
    """Full selection pipeline: embed, attend, gate, choose, crop."""

    def __init__(
        self,
        channels: int = 16,
        pool: int = 4,
        n_regions: int = 2,
        region_size: int = 64,
        theta: float = 0.0,
    ):
        super().__init__()
        self.channels = channels
        self.pool = pool
        self.n_regions = n_regions
        self.region_size = region_size
        self.theta = theta
        self.query_encoder = _Encoder(channels)
        self.key_encoder = _Encoder(channels)
        self.value_encoder = _Encoder(channels)

    def embed(self, image: torch.Tensor) -> QKVEmbedding:
        """Independent Q/K/V feature maps plus their pooled reductions."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) patch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        factor = 16 * self.pool
        if h % factor or w % factor:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {factor}")
        x = image.unsqueeze(0)
        xq = self.query_encoder(x)
        xk = self.key_encoder(x)
        xv = self.value_encoder(x)
        xq_s = F.avg_pool2d(xq, self.pool)
        xk_s = F.avg_pool2d(xk, self.pool)
        xv_s = F.avg_pool2d(xv, self.pool)
        return QKVEmbedding(
            xq=xq[0], xk=xk[0], xv=xv[0],
            xq_small=xq_s[0], xk_small=xk_s[0], xv_small=xv_s[0],
        )

    def attend(self, embedding: QKVEmbedding) -> AttentionState:
        a = attention_map(embedding.xq_small, embedding.xk_small)
        p = importance(a, embedding.xv_small)
        m, p_gated = gate(p, self.theta)
        return AttentionState(
            attention=a, importance=p, gate=m,
            gated_importance=p_gated, theta=self.theta,
        )

    def forward(
        self, image: torch.Tensor, n: int | None = None, size: int | None = None
    ) -> tuple[QKVEmbedding, AttentionState, RegionSet]:
        n = self.n_regions if n is None else n
        size = self.region_size if size is None else size
        embedding = self.embed(image)
        state = self.attend(embedding)
        coords, indices = select_regions(
            state.gated_importance, n, size,
            image.shape[-2:], embedding.grid_shape,
        )
        regions = crop_regions(image, coords, size)
        return embedding, state, RegionSet(
            coords=coords, size=size, regions=regions, grid_indices=indices,
            source_dims=tuple(image.shape[-2:]),
        )
