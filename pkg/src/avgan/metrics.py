"""Distribution and structure metrics for translated image sets.

FID and KID are computed over feature embeddings from a pluggable
extractor; the bundled extractor is a small fixed-seed random convolutional
network so the metric math stays testable without pretrained weights. An
adapter slot for a torchvision Inception-v3 backbone exists for users who
want conventionally comparable numbers.

The structural score is the mean windowed structural similarity between the
hematoxylin maps of paired source and translated images: it measures how
well nuclear structure survives translation, not how realistic the output
looks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from scipy.ndimage import gaussian_filter

from .color_space import h_channel

logger = logging.getLogger(__name__)

_EIG_FLOOR = 1e-10
_COV_EPS = 1e-6


class ToyConvExtractor:
    """Deterministic random-weight conv feature extractor.

    Same image in, same features out, for any process with the same seed.
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        self.name = f"toy-conv-{seed}-{dim}"
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, dim]
        layers = []
        for cin, cout in zip(widths, widths[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / (3.0 * cin**0.5)
                )
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
        self.net = nn.Sequential(*layers).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __call__(self, image: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            feats = self.net(image.unsqueeze(0))
        return feats.mean(dim=(2, 3))[0].numpy().astype(np.float64)

    def batch(self, images) -> np.ndarray:
        return np.stack([self(img) for img in images])


class InceptionExtractor:
    """Adapter for a torchvision Inception-v3 pool3 feature extractor.

    Needs torchvision with downloaded weights; not used by any test.
    """

    def __init__(self):
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:
            raise RuntimeError("torchvision is required for InceptionExtractor") from exc
        self.name = "inception-v3-pool3"
        self.dim = 2048
        model = inception_v3(weights="DEFAULT", aux_logits=True)
        model.fc = nn.Identity()
        self.net = model.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __call__(self, image: torch.Tensor) -> np.ndarray:
        x = torch.nn.functional.interpolate(
            image.unsqueeze(0), size=(299, 299), mode="bilinear", align_corners=False
        )
        with torch.no_grad():
            feats = self.net(x * 2.0 - 1.0)
        return feats[0].numpy().astype(np.float64)

    def batch(self, images) -> np.ndarray:
        return np.stack([self(img) for img in images])


def _regularized_cov(features: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    if np.linalg.eigvalsh(cov).min() < _EIG_FLOOR:
        logger.info("singular covariance, adding %g to the diagonal", _COV_EPS)
        cov = cov + _COV_EPS * np.eye(cov.shape[0])
    return cov


def fid_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians given exact moments.

    ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a C_b)^(1/2)), with the matrix
    square root taken through symmetric eigendecompositions and tiny
    negative eigenvalues clamped to zero.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    diff = mu_a - mu_b
    evals_a, evecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (evecs_a * np.sqrt(np.clip(evals_a, 0.0, None))) @ evecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    inner_evals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sqrt(np.clip(inner_evals, 0.0, None)).sum()
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt
    return float(max(value, 0.0))


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between the sample moments of two feature sets."""
    features_a, features_b = np.asarray(features_a), np.asarray(features_b)
    if features_a.ndim != 2 or features_b.ndim != 2:
        raise ValueError("feature sets must be (n, d) arrays")
    if features_a.shape[0] < 2 or features_b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    if features_a.shape[1] != features_b.shape[1]:
        raise ValueError("feature dimensions must match")
    return fid_from_moments(
        features_a.mean(axis=0), _regularized_cov(features_a),
        features_b.mean(axis=0), _regularized_cov(features_b),
    )


def polynomial_kernel(x: np.ndarray, y: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Cubic polynomial kernel (x.y / d + 1)^3 used by the kernel distance."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    d = x.shape[1] if dim is None else dim
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(a: np.ndarray, b: np.ndarray) -> float:
    m, n = a.shape[0], b.shape[0]
    k_aa = polynomial_kernel(a, a)
    k_bb = polynomial_kernel(b, b)
    k_ab = polynomial_kernel(a, b)
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * k_ab.mean())


def kid(features_a: np.ndarray, features_b: np.ndarray, block_size: int | None = None) -> float:
    """Unbiased kernel (MMD^2) distance, reported on the x100 scale.

    Blocks of ``block_size`` samples are paired off in order and the
    per-block unbiased estimates are averaged; by default one block covers
    everything.
    """
    features_a, features_b = np.asarray(features_a), np.asarray(features_b)
    if features_a.shape[0] < 2 or features_b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    if features_a.shape[1] != features_b.shape[1]:
        raise ValueError("feature dimensions must match")
    n = min(features_a.shape[0], features_b.shape[0])
    if block_size is None or block_size > n:
        block_size = n
    n_blocks = n // block_size
    estimates = [
        _mmd2_unbiased(
            features_a[i * block_size : (i + 1) * block_size],
            features_b[i * block_size : (i + 1) * block_size],
        )
        for i in range(n_blocks)
    ]
    return 100.0 * float(np.mean(estimates))


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0,
         sigma: float = 1.5, truncate: float = 3.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed structural similarity of two 2-D maps.

    The border where the window hangs off the map is cropped before
    averaging. Identical inputs score exactly 1.0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("inputs must be 2-D maps of one shape")
    filt = lambda a: gaussian_filter(a, sigma, truncate=truncate)
    ux, uy = filt(x), filt(y)
    vx = filt(x * x) - ux * ux
    vy = filt(y * y) - uy * uy
    vxy = filt(x * y) - ux * uy
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    ssim_map = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    pad = int(truncate * sigma + 0.5)
    interior = ssim_map[pad:-pad, pad:-pad] if min(x.shape) > 2 * pad else ssim_map
    return float(interior.mean())


def css(source_set, translated_set, stain_matrix=None) -> float:
    """Mean hematoxylin-map structural similarity over paired images.

    Pairs source image i with translated image i; the sets must line up.
    """
    if len(source_set) != len(translated_set):
        raise ValueError("source and translated sets must pair 1:1")
    if not source_set:
        raise ValueError("need at least one pair")
    scores = []
    for src, tr in zip(source_set, translated_set):
        h_src = h_channel(src, stain_matrix).detach().numpy()
        h_tr = h_channel(tr, stain_matrix).detach().numpy()
        scores.append(ssim(h_src, h_tr))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    fid: float
    kid_x100: float
    css: float | None
    n_samples: int
    extractor: str
    config_hash: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json_file(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def evaluate_sets(
    translated_images,
    target_images,
    source_images=None,
    extractor=None,
    config_hash: str = "",
    stain_matrix=None,
) -> MetricReport:
    """FID/KID between translated and target sets, structure score against
    the sources when given."""
    extractor = extractor or ToyConvExtractor()
    feats_tr = extractor.batch(translated_images)
    feats_tgt = extractor.batch(target_images)
    css_value = None
    if source_images is not None:
        css_value = css(source_images, translated_images, stain_matrix)
    return MetricReport(
        fid=fid(feats_tr, feats_tgt),
        kid_x100=kid(feats_tr, feats_tgt),
        css=css_value,
        n_samples=len(translated_images),
        extractor=extractor.name,
        config_hash=config_hash,
    )
