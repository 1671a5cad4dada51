"""Flat run configuration shared by every module.

One dataclass holds every documented config key. It round-trips through a
flat JSON key-value file and individual keys can be overridden from CLI
flags. ``config_hash`` fingerprints a run for metric reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    max_steps: int = 200
    seed: int = 0
    checkpoint_every: int = 100

    # stain deconvolution (None -> built-in H&E-DAB matrix)
    stain_matrix: tuple | None = None

    # key-region selection. theta sits below the typical importance range of
    # untrained encoders on [0,1] imagery so the top-n regions start active.
    n_regions: int = 2
    region_size: int = 64
    theta: float = -0.05
    attention_pool: int = 4
    attn_channels: int = 16

    # generators
    g_base_channels: int = 32
    g_res_blocks: int = 4
    shared_generators: bool = False
    lowres_size: int | None = None  # None -> half the input side

    # discriminators
    d_layers_low: int = 3
    d_layers_high: int = 2
    d_base_channels: int = 32

    # loss weights and PatchNCE settings
    lambda_adv: float = 1.0
    lambda_idt: float = 0.03
    lambda_nce: float = 1.0
    lambda_h: float = 2.5
    lambda_v: float = 1.0
    nce_temperature: float = 0.07
    nce_num_patches: int = 256

    # region selection mode: "attention" or "fixed" (ablation baseline)
    region_mode: str = "attention"

    # tiling protocol
    patch_size: int = 512
    tile_stride: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.region_mode not in ("attention", "fixed"):
            raise ValueError(f"unknown region_mode {self.region_mode!r}")
        if self.stain_matrix is not None:
            flat = tuple(float(v) for v in _flatten(self.stain_matrix))
            if len(flat) != 9:
                raise ValueError("stain_matrix must hold nine floats")
            self.stain_matrix = flat

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_file(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **overrides)

    def config_hash(self) -> str:
        """Short stable fingerprint of the full configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _flatten(values):
    for v in values:
        if isinstance(v, (list, tuple)):
            yield from _flatten(v)
        else:
            yield v
