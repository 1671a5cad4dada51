"""Dataset plumbing: tiling, synthetic pseudo-histology, unpaired sampling.

The synthetic generator renders nucleus blobs and a smooth stroma texture
through the stain recomposition path, once per domain with different stain
amplitude profiles. Both domains of one index share the structural process,
so nuclear (H channel) statistics match across domains and the structural
preservation loss has an attainable fixpoint.

Everything is seed-deterministic; per-step sampling is a pure function of
(seed, step) so training can resume without replaying RNG streams.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .color_space import hed_to_rgb_tensor


@dataclass
class TilingSpec:
    patch_size: int = 512
    stride: int = 64

    def __post_init__(self):
        if self.patch_size <= 0 or self.stride <= 0:
            raise ValueError("patch_size and stride must be positive")
        if self.stride > self.patch_size:
            raise ValueError("stride must not exceed patch_size")


@dataclass
class SyntheticStyle:
    """Stain rendering profile of one domain.

    nucleus_density is blobs per 10^4 px^2; stain_profile holds the
    (H, E, D) optical-density amplitudes; texture_seed offsets the stroma
    texture stream (equal seeds share the texture across domains).
    """

    nucleus_density: float = 6.0
    stain_profile: tuple[float, float, float] = (0.75, 0.55, 0.05)
    texture_seed: int = 0

    def __post_init__(self):
        if self.nucleus_density <= 0:
            raise ValueError("nucleus_density must be positive")


# Pink H&E-like source domain and a colder trichrome-like target domain.
# Equal H amplitudes keep nuclear statistics matched between domains.
STYLE_SOURCE = SyntheticStyle(stain_profile=(0.75, 0.55, 0.05))
STYLE_TARGET = SyntheticStyle(stain_profile=(0.75, 0.15, 0.55))


def tile_image(image: torch.Tensor, spec: TilingSpec) -> list[torch.Tensor]:
    """Row-major overlapping tiles; a window starts at every stride multiple
    where it still fits."""
    h, w = image.shape[-2:]
    if h < spec.patch_size or w < spec.patch_size:
        raise ValueError(f"image {h}x{w} smaller than patch size {spec.patch_size}")
    n_rows = (h - spec.patch_size) // spec.stride + 1
    n_cols = (w - spec.patch_size) // spec.stride + 1
    tiles = []
    for r in range(n_rows):
        for c in range(n_cols):
            top, left = r * spec.stride, c * spec.stride
            tiles.append(
                image[..., top : top + spec.patch_size, left : left + spec.patch_size]
            )
    return tiles


def tile_count(dim: int, spec: TilingSpec) -> int:
    return (dim - spec.patch_size) // spec.stride + 1


def _nucleus_map(rng: np.random.Generator, size: int, density: float) -> np.ndarray:
    """Elliptical nucleus blobs with soft edges, intensities in [0, 1]."""
    n_blobs = max(int(round(density * size * size / 1e4)), 0)
    mask = np.zeros((size, size), dtype=np.float64)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        a, b = rng.uniform(3.0, 9.0, 2)
        angle = rng.uniform(0, np.pi)
        intensity = rng.uniform(0.6, 1.0)
        radius = int(np.ceil(max(a, b))) + 1
        y0, y1 = max(int(cy) - radius, 0), min(int(cy) + radius + 1, size)
        x0, x1 = max(int(cx) - radius, 0), min(int(cx) + radius + 1, size)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        ca, sa = np.cos(angle), np.sin(angle)
        u = (ca * dx + sa * dy) / a
        v = (-sa * dx + ca * dy) / b
        inside = (u * u + v * v) <= 1.0
        mask[y0:y1, x0:x1] = np.maximum(mask[y0:y1, x0:x1], inside * intensity)
    return gaussian_filter(mask, sigma=0.8)


def _stroma_map(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth low-frequency texture in [0, 1]."""
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24)
    lo, hi = noise.min(), noise.max()
    if hi - lo < 1e-12:
        return np.zeros_like(noise)
    return (noise - lo) / (hi - lo)


def render_synthetic_image(
    style: SyntheticStyle, seed: int, index: int, size: int = 256
) -> torch.Tensor:
    """One (3, size, size) RGB image in [0, 1].

    The nucleus layout is keyed by (seed, index) only, so every domain
    rendered for the same index shares it.
    """
    structure_rng = np.random.default_rng([seed, index])
    texture_rng = np.random.default_rng([seed, index, 1000 + style.texture_seed])
    nuclei = _nucleus_map(structure_rng, size, style.nucleus_density)
    stroma = _stroma_map(texture_rng, size)
    h_amp, e_amp, d_amp = style.stain_profile
    hed = np.stack(
        [
            h_amp * nuclei + 0.06 * stroma,
            e_amp * (0.25 + 0.6 * stroma),
            d_amp * (0.2 + 0.6 * stroma),
        ]
    )
    return hed_to_rgb_tensor(torch.as_tensor(hed, dtype=torch.float32))


def make_synthetic_pair_domains(
    style_a: SyntheticStyle,
    style_b: SyntheticStyle,
    count: int,
    seed: int,
    size: int = 256,
    start_index: int = 0,
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Two unpaired image sets with structurally matched indices."""
    images_a, images_b = [], []
    for i in range(start_index, start_index + count):
        images_a.append(render_synthetic_image(style_a, seed, i, size))
        images_b.append(render_synthetic_image(style_b, seed, i, size))
    return images_a, images_b


def save_image(image: torch.Tensor, path):
    """Write a (3, H, W) tensor in [0, 1] as an 8-bit RGB PNG."""
    arr = (image.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path) -> torch.Tensor:
    """Read an RGB image file into a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def list_images(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.png"))


def write_synthetic_dataset(
    root,
    count_train: int,
    count_test: int,
    seed: int,
    size: int = 256,
    style_a: SyntheticStyle | None = None,
    style_b: SyntheticStyle | None = None,
    domains: tuple[str, str] = ("A", "B"),
    tiling: TilingSpec | None = None,
) -> dict:
    """Render both domains to ``<root>/<domain>/{train,test}`` plus a manifest."""
    root = Path(root)
    style_a = style_a or STYLE_SOURCE
    style_b = style_b or STYLE_TARGET
    tiling = tiling or TilingSpec()
    splits = (("train", count_train, 0), ("test", count_test, count_train))
    for split, count, start in splits:
        imgs_a, imgs_b = make_synthetic_pair_domains(
            style_a, style_b, count, seed, size, start_index=start
        )
        for domain, images in zip(domains, (imgs_a, imgs_b)):
            out = root / domain / split
            out.mkdir(parents=True, exist_ok=True)
            for offset, image in enumerate(images):
                save_image(image, out / f"{domain}_{start + offset:05d}.png")
    manifest = {
        "domains": list(domains),
        "counts": {"train": count_train, "test": count_test},
        "image_size": size,
        "seed": seed,
        "tiling": asdict(tiling),
        "styles": {domains[0]: asdict(style_a), domains[1]: asdict(style_b)},
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class UnpairedSampler:
    """Uniform independent sampling of (x, y) pairs from two domains.

    The sample drawn at a given step is a pure function of (seed, step), so
    a resumed run continues the exact sequence. One epoch is max(|A|, |B|)
    steps. ``num_workers`` >= 1 enables background prefetch of decoded
    images; the sample sequence itself does not depend on worker count.
    """

    def __init__(self, dir_a, dir_b, seed: int = 0, num_workers: int = 0):
        self.paths_a = list_images(dir_a)
        self.paths_b = list_images(dir_b)
        if not self.paths_a:
            raise ValueError(f"no images found in {dir_a}")
        if not self.paths_b:
            raise ValueError(f"no images found in {dir_b}")
        self.seed = seed
        self.num_workers = num_workers

    def __len__(self) -> int:
        return max(len(self.paths_a), len(self.paths_b))

    def indices(self, step: int) -> tuple[int, int]:
        rng = np.random.default_rng([self.seed, step])
        return int(rng.integers(len(self.paths_a))), int(rng.integers(len(self.paths_b)))

    def pair(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        ia, ib = self.indices(step)
        return load_image(self.paths_a[ia]), load_image(self.paths_b[ib])

    def iter_pairs(self, start_step: int = 0, stop_step: int | None = None):
        step = start_step
        if self.num_workers >= 1:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                lookahead = 2 * self.num_workers
                pending = {
                    s: pool.submit(self.pair, s)
                    for s in range(step, step + lookahead)
                    if stop_step is None or s < stop_step
                }
                while stop_step is None or step < stop_step:
                    yield pending.pop(step).result()
                    nxt = step + lookahead
                    if stop_step is None or nxt < stop_step:
                        pending[nxt] = pool.submit(self.pair, nxt)
                    step += 1
        else:
            while stop_step is None or step < stop_step:
                yield self.pair(step)
                step += 1
