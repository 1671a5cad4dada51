import numpy as np
import pytest
import torch

from avgan.color_space import (
    DEFAULT_STAIN_MATRIX,
    HEDImage,
    h_channel,
    hed_to_rgb,
    hed_to_rgb_tensor,
    rgb_to_hed,
    rgb_to_hed_tensor,
)

HEMATOXYLIN_BASIS_RGB = (0.22387211, 0.19952623, 0.51286138)  # 10^(-H row)


def random_ingamut_pixels(n, seed=0, max_conc=1.2):
    """RGB pixels rendered from nonnegative stain concentrations."""
    rng = np.random.default_rng(seed)
    conc = torch.as_tensor(
        rng.uniform(0.0, max_conc, size=(3, n, 1)), dtype=torch.float32
    )
    return hed_to_rgb_tensor(conc)


def test_white_pixel_is_unstained():
    white = torch.ones(3, 2, 2)
    hed = rgb_to_hed(white)
    for channel in (hed.h, hed.e, hed.d):
        assert channel.abs().max() < 1e-6


def test_hematoxylin_basis_pixel():
    px = torch.tensor(HEMATOXYLIN_BASIS_RGB).reshape(3, 1, 1)
    hed = rgb_to_hed(px)
    assert abs(hed.h.item() - 1.0) < 1e-3
    assert abs(hed.e.item()) < 1e-3
    assert abs(hed.d.item()) < 1e-3


def test_round_trip_within_tolerance():
    rgb = random_ingamut_pixels(1000, seed=1)
    back = hed_to_rgb(rgb_to_hed_tensor(rgb))
    assert (back - rgb).abs().max().item() <= 2.0 / 255.0


def test_zero_hed_is_white():
    rgb = hed_to_rgb(HEDImage(h=torch.zeros(4, 4), e=torch.zeros(4, 4), d=torch.zeros(4, 4)))
    assert (rgb - 1.0).abs().max() < 1e-6


def test_unit_h_concentration_renders_basis_pixel():
    hed = torch.zeros(3, 1, 1)
    hed[0, 0, 0] = 1.0
    rgb = hed_to_rgb_tensor(hed)
    expected = torch.tensor(HEMATOXYLIN_BASIS_RGB)
    assert (rgb.flatten() - expected).abs().max() < 1e-6


def test_h_channel_matches_full_conversion():
    rgb = random_ingamut_pixels(64, seed=2).reshape(3, 8, 8)
    assert torch.equal(h_channel(rgb), rgb_to_hed(rgb).h)


def test_h_channel_is_per_pixel():
    rgb = random_ingamut_pixels(64, seed=3).reshape(3, 8, 8)
    perm = torch.randperm(64, generator=torch.Generator().manual_seed(0))
    shuffled = rgb.reshape(3, 64)[:, perm].reshape(3, 8, 8)
    assert torch.allclose(
        h_channel(shuffled), h_channel(rgb).reshape(64)[perm].reshape(8, 8), atol=1e-6
    )


def test_h_channel_nonnegative():
    rng = np.random.default_rng(4)
    rgb = torch.as_tensor(rng.uniform(0, 1, (3, 16, 16)), dtype=torch.float32)
    assert h_channel(rgb).min().item() >= 0.0


def test_rejects_non_rgb_input():
    with pytest.raises(ValueError):
        rgb_to_hed_tensor(torch.ones(4, 8, 8))
    with pytest.raises(ValueError):
        rgb_to_hed(torch.ones(3, 8))


def test_stain_matrix_override():
    identity = np.eye(3)
    rgb = torch.full((3, 2, 2), 0.1)
    hed = rgb_to_hed_tensor(rgb, stain_matrix=identity)
    expected = -np.log10(0.1)
    assert (hed - expected).abs().max() < 1e-6
    assert np.allclose(np.asarray(DEFAULT_STAIN_MATRIX)[0], [0.65, 0.70, 0.29])


def test_conversion_is_differentiable():
    rgb = random_ingamut_pixels(16, seed=5).reshape(3, 4, 4).requires_grad_(True)
    h_channel(rgb).sum().backward()
    assert rgb.grad is not None
    assert torch.isfinite(rgb.grad).all()
