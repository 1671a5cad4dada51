"""Loss terms of the training objective.

Five components: least-squares adversarial, L1 identity, patchwise
contrastive (InfoNCE over matched spatial locations), H-channel nucleus
preservation, and the varifocal consistency term that couples the
low-resolution and high-resolution generators. Every L1 reduction is a
mean over elements so the default weights keep the terms at similar
magnitude regardless of image or region count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .color_space import h_channel
from .region_selection import RegionSet


@dataclass
class LossWeights:
    adv: float = 1.0
    idt: float = 0.03
    nce: float = 1.0
    h: float = 2.5
    varifocal: float = 1.0

    def __post_init__(self):
        for name in ("adv", "idt", "nce", "h", "varifocal"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be nonnegative")


def adversarial_loss(
    logits_fake: torch.Tensor,
    logits_real: torch.Tensor | None = None,
    role: str = "generator",
) -> torch.Tensor:
    """Least-squares GAN objective.

    generator: mean((fake - 1)^2). discriminator: mean((real - 1)^2) +
    mean(fake^2).
    """
    if role == "generator":
        return ((logits_fake - 1.0) ** 2).mean()
    if role == "discriminator":
        if logits_real is None:
            raise ValueError("discriminator role needs real logits")
        return ((logits_real - 1.0) ** 2).mean() + (logits_fake**2).mean()
    raise ValueError(f"unknown role {role!r}")


def identity_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between a generator's output on a
    target-domain image and the image itself."""
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(output.shape)} vs {tuple(target.shape)}")
    return (output - target).abs().mean()


def patch_nce_loss(
    feats_source: list[torch.Tensor] | torch.Tensor,
    feats_translated: list[torch.Tensor] | torch.Tensor,
    n_patches: int = 256,
    tau: float = 0.07,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Patchwise InfoNCE across encoder depths.

    For each layer the same spatial locations are sampled from both feature
    maps; the positive for a translated-feature vector is the source vector
    at the same location, the negatives are the other sampled source
    vectors. Source-side features are detached. Features are L2-normalized
    before the dot products.
    """
    if isinstance(feats_source, torch.Tensor):
        feats_source = [feats_source]
    if isinstance(feats_translated, torch.Tensor):
        feats_translated = [feats_translated]
    if len(feats_source) != len(feats_translated):
        raise ValueError("feature lists must pair up layer by layer")
    if rng is None:
        rng = np.random.default_rng(0)

    layer_losses = []
    for src, tr in zip(feats_source, feats_translated):
        if src.shape != tr.shape:
            raise ValueError("source/translated feature shapes must match")
        k = src.flatten(1).transpose(0, 1)  # (L, C)
        q = tr.flatten(1).transpose(0, 1)
        n_locations = q.shape[0]
        if n_locations < n_patches:
            raise ValueError(
                f"layer has {n_locations} locations, fewer than {n_patches} requested"
            )
        if n_locations > n_patches:
            idx = np.sort(rng.choice(n_locations, size=n_patches, replace=False))
            idx = torch.as_tensor(idx, device=q.device)
            q, k = q[idx], k[idx]
        q = F.normalize(q, dim=1)
        k = F.normalize(k.detach(), dim=1)
        logits = q @ k.transpose(0, 1) / tau
        target = torch.arange(logits.shape[0], device=logits.device)
        layer_losses.append(F.cross_entropy(logits, target))
    return torch.stack(layer_losses).mean()


def h_channel_loss(
    source: torch.Tensor, translated: torch.Tensor, stain_matrix=None
) -> torch.Tensor:
    """Mean absolute difference of the hematoxylin maps of two RGB images."""
    if source.shape != translated.shape:
        raise ValueError(f"shape mismatch {tuple(source.shape)} vs {tuple(translated.shape)}")
    return (h_channel(source, stain_matrix) - h_channel(translated, stain_matrix)).abs().mean()


def _resize_to_smaller(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Area-resize the larger of two (3, H, W) images to the smaller one."""
    if a.shape[-2:] == b.shape[-2:]:
        return a, b
    if a.shape[-1] * a.shape[-2] > b.shape[-1] * b.shape[-2]:
        a = F.interpolate(a.unsqueeze(0), size=b.shape[-2:], mode="area")[0]
    else:
        b = F.interpolate(b.unsqueeze(0), size=a.shape[-2:], mode="area")[0]
    return a, b


def varifocal_loss(
    g1_output: torch.Tensor,
    region_set: RegionSet,
    g2_outputs: list[torch.Tensor],
    region_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Consistency between G1's translation and G2's region translations.

    For each key region, the matching window is cropped from the (usually
    smaller) G1 output, the larger image of the pair is area-resized to the
    smaller, and the mean L1 difference is taken. Per-region values are
    summed; ``region_weights`` (e.g. the selection gate values) scale the
    per-region terms before the sum.
    """
    if len(region_set.coords) != len(g2_outputs):
        raise ValueError("one G2 output required per selected region")
    src_h, src_w = region_set.source_dims
    low_h, low_w = g1_output.shape[-2:]
    scale_h, scale_w = low_h / src_h, low_w / src_w
    size_h = max(int(round(region_set.size * scale_h)), 1)
    size_w = max(int(round(region_set.size * scale_w)), 1)
    if size_h > low_h or size_w > low_w:
        raise ValueError("scaled region does not fit inside the G1 output")

    total = g1_output.new_zeros(())
    for i, ((top, left), g2_out) in enumerate(zip(region_set.coords, g2_outputs)):
        t = min(max(int(round(top * scale_h)), 0), low_h - size_h)
        l = min(max(int(round(left * scale_w)), 0), low_w - size_w)
        low_crop = g1_output[..., t : t + size_h, l : l + size_w]
        a, b = _resize_to_smaller(low_crop, g2_out)
        term = (a - b).abs().mean()
        if region_weights is not None:
            term = term * region_weights[i]
        total = total + term
    return total


def total_loss(
    adv: torch.Tensor | float,
    idt: torch.Tensor | float,
    nce_x: torch.Tensor | float,
    nce_y: torch.Tensor | float,
    h: torch.Tensor | float,
    varifocal: torch.Tensor | float,
    weights: LossWeights | None = None,
):
    """Weighted sum of all components; the contrastive term covers both
    domains."""
    w = weights or LossWeights()
    return (
        w.adv * adv
        + w.idt * idt
        + w.nce * (nce_x + nce_y)
        + w.h * h
        + w.varifocal * varifocal
    )
