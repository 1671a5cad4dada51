"""RGB <-> HED stain-space conversion.

HED is the stain concentration space obtained by color deconvolution of
brightfield histology images: H (hematoxylin, nuclei), E (eosin, cytoplasm),
D (DAB / residual). The H channel carries nuclear structure and is the
carrier of the structural preservation loss.

All conversions are built from differentiable torch primitives so they can
sit inside the generator's autograd graph. The default deconvolution matrix
is the Ruifrok-Johnston H&E-DAB matrix; it can be overridden through the
``stain_matrix`` config key (nine floats, row-major, rows = H, E, D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Rows are the RGB optical-density signatures of H, E and D.
DEFAULT_STAIN_MATRIX = (
    (0.65, 0.70, 0.29),
    (0.07, 0.99, 0.11),
    (0.27, 0.57, 0.78),
)

# Floor inside the log so zero pixels stay finite.
OD_EPS = 1e-6

_LN10 = 2.302585092994046


@dataclass
class HEDImage:
    """Per-stain optical density maps of one image.

    Negative concentrations are clamped to zero on conversion, so all three
    maps are nonnegative. The maps share one spatial shape.
    """

    h: torch.Tensor
    e: torch.Tensor
    d: torch.Tensor

    def __post_init__(self):
        if not (self.h.shape == self.e.shape == self.d.shape):
            raise ValueError("h, e, d maps must share one spatial shape")

    @property
    def height(self) -> int:
        return self.h.shape[-2]

    @property
    def width(self) -> int:
        return self.h.shape[-1]

    def stack(self) -> torch.Tensor:
        """Channels-first (3, H, W) tensor of the three maps."""
        return torch.stack((self.h, self.e, self.d), dim=-3)


def stain_matrices(
    stain_matrix=None, dtype=torch.float32, device=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward (stain rows -> RGB OD) and inverse deconvolution matrices."""
    if stain_matrix is None:
        stain_matrix = DEFAULT_STAIN_MATRIX
    m = np.asarray(stain_matrix, dtype=np.float64).reshape(3, 3)
    m_inv = np.linalg.inv(m)
    fwd = torch.as_tensor(m, dtype=dtype, device=device)
    inv = torch.as_tensor(m_inv, dtype=dtype, device=device)
    return fwd, inv


def _check_rgb(image: torch.Tensor):
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ValueError(
            f"expected (..., 3, H, W) RGB tensor, got shape {tuple(image.shape)}"
        )


def rgb_to_hed_tensor(image: torch.Tensor, stain_matrix=None) -> torch.Tensor:
    """Deconvolve an RGB tensor in [0, 1] into stain concentrations.

    OD = -log10(max(rgb, eps)) per channel, then multiplication by the
    inverse stain matrix. Negative concentrations are clamped to 0.
    Accepts (3, H, W) or any leading batch dims.
    """
    _check_rgb(image)
    _, inv = stain_matrices(stain_matrix, dtype=image.dtype, device=image.device)
    od = -torch.log(torch.clamp(image, min=OD_EPS)) / _LN10
    hed = torch.einsum("...chw,cs->...shw", od, inv)
    return torch.clamp(hed, min=0.0)


def hed_to_rgb_tensor(hed: torch.Tensor, stain_matrix=None) -> torch.Tensor:
    """Recompose stain concentrations into an RGB tensor in [0, 1]."""
    _check_rgb(hed)
    fwd, _ = stain_matrices(stain_matrix, dtype=hed.dtype, device=hed.device)
    od = torch.einsum("...shw,sc->...chw", hed, fwd)
    rgb = torch.exp(-od * _LN10)
    return torch.clamp(rgb, 0.0, 1.0)


def rgb_to_hed(image: torch.Tensor, stain_matrix=None) -> HEDImage:
    """Convert one (3, H, W) RGB patch to an :class:`HEDImage`."""
    if image.ndim != 3:
        raise ValueError(f"expected a (3, H, W) patch, got shape {tuple(image.shape)}")
    hed = rgb_to_hed_tensor(image, stain_matrix)
    return HEDImage(h=hed[0], e=hed[1], d=hed[2])


def hed_to_rgb(image: HEDImage | torch.Tensor, stain_matrix=None) -> torch.Tensor:
    """Convert an :class:`HEDImage` (or stacked (3, H, W) tensor) back to RGB."""
    hed = image.stack() if isinstance(image, HEDImage) else image
    return hed_to_rgb_tensor(hed, stain_matrix)


def h_channel(image: torch.Tensor, stain_matrix=None) -> torch.Tensor:
    """Hematoxylin concentration map of an RGB image.

    Per-pixel operator: output at (i, j) depends only on the input pixel at
    (i, j). Accepts (3, H, W) or batched (..., 3, H, W); returns (..., H, W).
    """
    hed = rgb_to_hed_tensor(image, stain_matrix)
    return hed[..., 0, :, :]
