"""Training loop, checkpointing, and batch translation.

Each step runs the full dataflow: resize, translate globally with G1,
select and crop key regions, translate them with G2, update the two patch
discriminators, then update the generators (and the region selector's
encoders) against the weighted five-term objective.

Per-step randomness (sample choice, real-crop positions, contrastive
location sampling) is a pure function of (seed, step), so seeded runs are
reproducible and checkpoint resume continues the exact stream. The metrics
CSV holds only deterministic columns; wall-clock timings go to a separate
timing CSV so two seeded runs produce byte-identical metrics files.
"""

from __future__ import annotations

import csv
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import UnpairedSampler, list_images, load_image, save_image
from .discriminators import PatchDiscriminator, build_discriminators
from .generators import Generator, build_generators
from .losses import (
    LossWeights,
    adversarial_loss,
    h_channel_loss,
    identity_loss,
    patch_nce_loss,
    total_loss,
    varifocal_loss,
)
from .region_selection import (
    RegionSelector,
    RegionSet,
    crop_regions,
    fixed_region_coords,
)

CHECKPOINT_VERSION = 1

METRIC_FIELDS = (
    "step",
    "loss_d1",
    "loss_d2",
    "loss_adv",
    "loss_idt",
    "loss_nce",
    "loss_h",
    "loss_v",
    "loss_g_total",
)


class TrainingDivergedError(RuntimeError):
    """Raised when any loss component goes non-finite; carries the dump."""

    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {components}")


@dataclass
class ModelBundle:
    g1: Generator
    g2: Generator
    d1: PatchDiscriminator
    d2: PatchDiscriminator
    selector: RegionSelector
    lowres_size: int

    def generator_parameters(self):
        seen, params = set(), []
        for module in (self.g1, self.g2, self.selector):
            for p in module.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def discriminator_parameters(self):
        return list(self.d1.parameters()) + list(self.d2.parameters())

    def state_dict(self) -> dict:
        return {
            "g1": self.g1.state_dict(),
            "g2": self.g2.state_dict(),
            "d1": self.d1.state_dict(),
            "d2": self.d2.state_dict(),
            "selector": self.selector.state_dict(),
        }

    def load_state_dict(self, state: dict):
        self.g1.load_state_dict(state["g1"])
        self.g2.load_state_dict(state["g2"])
        self.d1.load_state_dict(state["d1"])
        self.d2.load_state_dict(state["d2"])
        self.selector.load_state_dict(state["selector"])

    def train(self):
        for m in (self.g1, self.g2, self.d1, self.d2, self.selector):
            m.train()

    def eval(self):
        for m in (self.g1, self.g2, self.d1, self.d2, self.selector):
            m.eval()


def build_models(config: TrainConfig, image_size: int) -> ModelBundle:
    """Seeded construction of all parameter stores for one run."""
    torch.manual_seed(config.seed)
    lowres = config.lowres_size or image_size // 2
    g1, g2 = build_generators(
        base_channels=config.g_base_channels,
        n_res_blocks=config.g_res_blocks,
        lowres_size=lowres,
        region_size=config.region_size,
        shared=config.shared_generators,
    )
    d1, d2 = build_discriminators(
        config.d_layers_low, config.d_layers_high, config.d_base_channels
    )
    selector = RegionSelector(
        channels=config.attn_channels,
        pool=config.attention_pool,
        n_regions=config.n_regions,
        region_size=config.region_size,
        theta=config.theta,
    )
    return ModelBundle(g1=g1, g2=g2, d1=d1, d2=d2, selector=selector, lowres_size=lowres)


def build_optimizers(bundle: ModelBundle, config: TrainConfig):
    opt_g = torch.optim.Adam(
        bundle.generator_parameters(), lr=config.lr, betas=(config.beta1, config.beta2)
    )
    opt_d = torch.optim.Adam(
        bundle.discriminator_parameters(), lr=config.lr, betas=(config.beta1, config.beta2)
    )
    return opt_g, opt_d


def _resize(image: torch.Tensor, size: int) -> torch.Tensor:
    if image.shape[-1] == size and image.shape[-2] == size:
        return image
    return F.interpolate(image.unsqueeze(0), size=(size, size), mode="area")[0]


def _select(
    bundle: ModelBundle, config: TrainConfig, image: torch.Tensor
) -> tuple[RegionSet, torch.Tensor]:
    """Key regions plus per-region weights for the gradient path.

    Attention mode weights each region by its selection gate value, which
    is how region-level losses reach the query/key/value encoders. Fixed
    mode uses unit weights and never touches the encoders.
    """
    if config.region_mode == "attention":
        _, state, region_set = bundle.selector(image)
        weights = state.gate[region_set.grid_indices]
    else:
        dims = tuple(image.shape[-2:])
        coords = fixed_region_coords(dims, config.n_regions, config.region_size)
        region_set = RegionSet(
            coords=coords,
            size=config.region_size,
            regions=crop_regions(image, coords, config.region_size),
            grid_indices=[],
            source_dims=dims,
        )
        weights = image.new_ones(len(coords))
    return region_set, weights


def _real_region_crops(
    target: torch.Tensor, size: int, n: int, seed: int, step: int, sample: int
) -> list[torch.Tensor]:
    """Random target-domain crops standing in as D2's real samples."""
    h, w = target.shape[-2:]
    rng = np.random.default_rng([seed, step, 7, sample])
    tops = rng.integers(0, h - size + 1, n)
    lefts = rng.integers(0, w - size + 1, n)
    return crop_regions(target, list(zip(tops.tolist(), lefts.tolist())), size)


def train_step(
    batch: list[tuple[torch.Tensor, torch.Tensor]],
    bundle: ModelBundle,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    config: TrainConfig,
    step: int,
) -> dict:
    """One discriminator update followed by one generator update.

    Returns every loss component as a float. Raises
    :class:`TrainingDivergedError` as soon as any component is non-finite.
    """
    weights = LossWeights(
        adv=config.lambda_adv,
        idt=config.lambda_idt,
        nce=config.lambda_nce,
        h=config.lambda_h,
        varifocal=config.lambda_v,
    )
    forwards = []
    for x, y in batch:
        x_low = _resize(x, bundle.lowres_size)
        y_low = _resize(y, bundle.lowres_size)
        fake_low = bundle.g1(x_low)
        region_set, region_weights = _select(bundle, config, x)
        g2_outs = [bundle.g2(r) for r in region_set.regions]
        forwards.append((x_low, y_low, fake_low, region_set, region_weights, g2_outs))

    # Discriminators first, on detached fakes.
    opt_d.zero_grad(set_to_none=True)
    d1_total = torch.zeros(())
    d2_total = torch.zeros(())
    for sample, (x_low, y_low, fake_low, region_set, _, g2_outs) in enumerate(forwards):
        d1_total = d1_total + adversarial_loss(
            bundle.d1(fake_low.detach()), bundle.d1(y_low), role="discriminator"
        )
        real_crops = _real_region_crops(
            batch[sample][1], region_set.size, len(g2_outs), config.seed, step, sample
        )
        d2_total = d2_total + adversarial_loss(
            bundle.d2(torch.stack(g2_outs).detach()),
            bundle.d2(torch.stack(real_crops)),
            role="discriminator",
        )
    d1_total = d1_total / len(batch)
    d2_total = d2_total / len(batch)
    (d1_total + d2_total).backward()
    opt_d.step()

    # Generators (and the attention encoders) against the fresh discriminators.
    opt_g.zero_grad(set_to_none=True)
    terms = {"adv": 0.0, "idt": 0.0, "nce_x": 0.0, "nce_y": 0.0, "h": 0.0, "v": 0.0}
    g_total = torch.zeros(())
    for sample, (x_low, y_low, fake_low, region_set, region_weights, g2_outs) in enumerate(
        forwards
    ):
        adv1 = adversarial_loss(bundle.d1(fake_low), role="generator")
        logits2 = bundle.d2(torch.stack(g2_outs))
        per_region = ((logits2 - 1.0) ** 2).mean(dim=(1, 2, 3))
        adv2 = (per_region * region_weights).mean()
        adv = adv1 + adv2

        idt_out = bundle.g1(y_low)
        idt = identity_loss(idt_out, y_low)

        nce_x = patch_nce_loss(
            bundle.g1.encode_features(x_low),
            bundle.g1.encode_features(fake_low),
            n_patches=config.nce_num_patches,
            tau=config.nce_temperature,
            rng=np.random.default_rng([config.seed, step, 11, sample]),
        )
        nce_y = patch_nce_loss(
            bundle.g1.encode_features(y_low),
            bundle.g1.encode_features(idt_out),
            n_patches=config.nce_num_patches,
            tau=config.nce_temperature,
            rng=np.random.default_rng([config.seed, step, 13, sample]),
        )
        h = h_channel_loss(x_low, fake_low, config.stain_matrix)
        v = varifocal_loss(fake_low, region_set, g2_outs, region_weights=region_weights)

        g_total = g_total + total_loss(adv, idt, nce_x, nce_y, h, v, weights)
        for key, value in (("adv", adv), ("idt", idt), ("nce_x", nce_x),
                           ("nce_y", nce_y), ("h", h), ("v", v)):
            terms[key] += float(value.detach())

    g_total = g_total / len(batch)
    g_total.backward()
    opt_g.step()

    n = len(batch)
    metrics = {
        "step": step,
        "loss_d1": float(d1_total.detach()),
        "loss_d2": float(d2_total.detach()),
        "loss_adv": terms["adv"] / n,
        "loss_idt": terms["idt"] / n,
        "loss_nce": (terms["nce_x"] + terms["nce_y"]) / n,
        "loss_h": terms["h"] / n,
        "loss_v": terms["v"] / n,
        "loss_g_total": float(g_total.detach()),
    }
    bad = {k: v for k, v in metrics.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergedError(step, metrics)
    return metrics


def save_checkpoint(
    path,
    step: int,
    bundle: ModelBundle,
    opt_g,
    opt_d,
    config: TrainConfig,
    image_size: int,
):
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "models": bundle.state_dict(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
        "config": config.to_dict(),
        "image_size": image_size,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload


def restore_models(payload: dict) -> tuple[ModelBundle, TrainConfig, int]:
    """Rebuild a bundle from a checkpoint payload; returns (bundle, config,
    image_size)."""
    config = TrainConfig.from_dict(payload["config"])
    bundle = build_models(config, payload["image_size"])
    bundle.load_state_dict(payload["models"])
    return bundle, config, payload["image_size"]


def _infer_image_size(dir_a) -> int:
    paths = list_images(dir_a)
    if not paths:
        raise ValueError(f"no images found in {dir_a}")
    return load_image(paths[0]).shape[-1]


def train(
    config: TrainConfig,
    dir_a,
    dir_b,
    out_dir,
    resume: bool = False,
    num_workers: int = 0,
) -> Path:
    """Run ``config.max_steps`` training steps; returns the final checkpoint
    path.

    Writes ``metrics.csv`` (one row per step, deterministic columns only),
    ``timing.csv`` (per-step wall time) and periodic checkpoints under
    ``out_dir``. With ``resume=True`` the latest checkpoint in ``out_dir``
    is loaded and the run continues from the next step.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "checkpoint_latest.pt"
    metrics_path = out_dir / "metrics.csv"
    timing_path = out_dir / "timing.csv"

    image_size = _infer_image_size(dir_a)
    start_step = 0
    if resume and latest.exists():
        payload = load_checkpoint(latest)
        bundle, config, image_size = restore_models(payload)
        opt_g, opt_d = build_optimizers(bundle, config)
        opt_g.load_state_dict(payload["opt_g"])
        opt_d.load_state_dict(payload["opt_d"])
        torch.set_rng_state(payload["torch_rng"])
        start_step = payload["step"]
        _truncate_csv(metrics_path, start_step)
        _truncate_csv(timing_path, start_step)
    else:
        config = config.replace(lowres_size=config.lowres_size or image_size // 2)
        bundle = build_models(config, image_size)
        opt_g, opt_d = build_optimizers(bundle, config)
        for path in (metrics_path, timing_path):
            if path.exists():
                path.unlink()

    sampler = UnpairedSampler(dir_a, dir_b, seed=config.seed, num_workers=num_workers)
    bundle.train()

    if config.max_steps == 0 and start_step == 0:
        save_checkpoint(latest, 0, bundle, opt_g, opt_d, config, image_size)
        return latest

    new_files = not metrics_path.exists()
    with open(metrics_path, "a", newline="") as mfh, open(timing_path, "a", newline="") as tfh:
        mwriter = csv.DictWriter(mfh, fieldnames=METRIC_FIELDS)
        twriter = csv.writer(tfh)
        if new_files:
            mwriter.writeheader()
            twriter.writerow(["step", "wall_time_s"])
        for step in range(start_step + 1, config.max_steps + 1):
            tic = time.perf_counter()
            batch = [sampler.pair(step * config.batch_size + i) for i in range(config.batch_size)]
            metrics = train_step(batch, bundle, opt_g, opt_d, config, step)
            mwriter.writerow({k: _fmt(metrics[k]) for k in METRIC_FIELDS})
            twriter.writerow([step, f"{time.perf_counter() - tic:.4f}"])
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                numbered = out_dir / f"checkpoint_step{step:06d}.pt"
                save_checkpoint(numbered, step, bundle, opt_g, opt_d, config, image_size)
                shutil.copyfile(numbered, latest)
    save_checkpoint(latest, config.max_steps, bundle, opt_g, opt_d, config, image_size)
    return latest


def _fmt(value):
    if isinstance(value, int):
        return value
    return f"{value:.10e}"


def _truncate_csv(path: Path, last_step: int):
    """Drop rows written after the checkpoint being resumed from."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1]
    for line in lines[1:]:
        try:
            step = int(line.split(",", 1)[0])
        except ValueError:
            continue
        if step <= last_step:
            kept.append(line)
    path.write_text("".join(kept))


def translate(
    checkpoint_path,
    input_dir,
    output_dir,
    save_coords: bool = False,
) -> list[Path]:
    """Translate every PNG in ``input_dir`` into ``output_dir``.

    Each patch goes through G1 at the working resolution, is upsampled back
    to the input size, and the selected key regions are replaced by their
    G2 translations. Filenames are preserved. With ``save_coords`` the
    selected region corners are written to ``coords.json`` alongside the
    outputs.
    """
    payload = load_checkpoint(checkpoint_path)
    bundle, config, _ = restore_models(payload)
    bundle.eval()
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    outputs, coord_log = [], {}
    with torch.no_grad():
        for path in list_images(input_dir):
            x = load_image(path)
            h, w = x.shape[-2:]
            fake_low = bundle.g1(_resize(x, bundle.lowres_size))
            up = F.interpolate(
                fake_low.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
            )[0]
            region_set, _ = _select(bundle, config, x)
            for (top, left), region in zip(region_set.coords, region_set.regions):
                refined = bundle.g2(region)
                up[:, top : top + region_set.size, left : left + region_set.size] = refined
            out_path = output_dir / path.name
            save_image(up.clamp(0.0, 1.0), out_path)
            outputs.append(out_path)
            coord_log[path.name] = [list(c) for c in region_set.coords]
    if save_coords:
        import json

        (output_dir / "coords.json").write_text(json.dumps(coord_log, indent=2, sort_keys=True))
    return outputs
