import math

import numpy as np
import pytest
import torch

from avgan.region_selection import (
    RegionSelector,
    attention_map,
    crop_regions,
    fixed_region_coords,
    gate,
    grid_to_pixel,
    importance,
    select_regions,
    top_n_indices,
)


def brute_force_top_n(values, n):
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return order[:n]


def test_embedding_shapes():
    selector = RegionSelector(channels=8)
    emb = selector.embed(torch.rand(3, 256, 256))
    assert emb.xq.shape == (8, 16, 16)
    assert emb.xq_small.shape == (8, 4, 4)
    assert emb.grid_shape == (4, 4)
    emb512 = selector.embed(torch.rand(3, 512, 512))
    assert emb512.xq_small.shape == (8, 8, 8)


def test_embedding_rejects_indivisible_dims():
    selector = RegionSelector(channels=8)
    with pytest.raises(ValueError):
        selector.embed(torch.rand(3, 200, 200))


def test_embedding_deterministic():
    torch.manual_seed(0)
    selector = RegionSelector(channels=8)
    x = torch.rand(3, 128, 128)
    a = selector.embed(x)
    b = selector.embed(x)
    assert torch.equal(a.xq_small, b.xq_small)
    assert torch.equal(a.xv, b.xv)


def test_qkv_encoders_are_independent():
    selector = RegionSelector(channels=8)
    q_params = {id(p) for p in selector.query_encoder.parameters()}
    k_params = {id(p) for p in selector.key_encoder.parameters()}
    v_params = {id(p) for p in selector.value_encoder.parameters()}
    assert not (q_params & k_params or q_params & v_params or k_params & v_params)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        xq = torch.as_tensor(rng.standard_normal((5, 16)), dtype=torch.float32)
        xk = torch.as_tensor(rng.standard_normal((5, 16)), dtype=torch.float32)
        a = attention_map(xq, xk)
        assert a.shape == (16, 16)
        assert (a.sum(dim=1) - 1.0).abs().max() < 1e-5


def test_attention_uniform_for_zero_logits():
    a = attention_map(torch.zeros(2, 4), torch.zeros(2, 4))
    assert (a - 0.25).abs().max() < 1e-6


def test_attention_closed_form_row():
    # logits row (0, ln 3) -> (0.25, 0.75)
    xq = torch.tensor([[1.0, 0.0]])
    xk = torch.tensor([[0.0, math.log(3.0)]])
    a = attention_map(xq, xk)
    assert torch.allclose(a[0], torch.tensor([0.25, 0.75]), atol=1e-6)


def test_attention_shift_invariance():
    xq = torch.randn(3, 6, generator=torch.Generator().manual_seed(1))
    xk = torch.randn(3, 6, generator=torch.Generator().manual_seed(2))
    a = attention_map(xq, xk)
    # adding a constant to one row of the logits leaves that row unchanged
    logits = xq.transpose(0, 1) @ xk
    shifted = logits.clone()
    shifted[2] += 3.7
    assert torch.allclose(torch.softmax(shifted, dim=1)[2], a[2], atol=1e-6)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        attention_map(torch.zeros(2, 4), torch.zeros(3, 4))


def test_importance_identity_attention():
    xv = torch.full((3, 4), 2.5)
    p = importance(torch.eye(4), xv)
    assert torch.allclose(p, torch.full((4,), 2.5))


def test_importance_uniform_attention_gives_global_mean():
    xv = torch.randn(5, 8, generator=torch.Generator().manual_seed(3))
    p = importance(torch.full((8, 8), 1.0 / 8.0), xv)
    assert torch.allclose(p, torch.full((8,), xv.mean().item()), atol=1e-6)


def test_importance_two_cells():
    p = importance(torch.eye(2), torch.tensor([[5.0, 7.0]]))
    assert torch.allclose(p, torch.tensor([5.0, 7.0]))


def test_importance_dim_mismatch():
    with pytest.raises(ValueError):
        importance(torch.eye(3), torch.zeros(2, 4))


def test_gate_at_threshold_is_half():
    m, p_gated = gate(torch.tensor([0.3]), theta=0.3)
    assert m.item() == 0.5
    assert p_gated.item() == pytest.approx(0.15)


def test_gate_just_above_threshold():
    m, _ = gate(torch.tensor([0.31]), theta=0.3)
    assert m.item() == pytest.approx(0.9999546021312976, rel=1e-6)


def test_gate_jacobian_is_diagonal_and_matches_fd():
    theta = 0.2
    p = torch.tensor([0.2, 0.5, -0.1], dtype=torch.float64, requires_grad=True)
    _, p_gated = gate(p, theta)
    jac = torch.autograd.functional.jacobian(lambda v: gate(v, theta)[1], p.detach())
    off_diag = jac - torch.diag(torch.diagonal(jac))
    assert off_diag.abs().max() == 0.0
    # central finite difference on the entry sitting exactly at theta
    eps = 1e-7
    up = gate(torch.tensor([theta + eps], dtype=torch.float64), theta)[1]
    dn = gate(torch.tensor([theta - eps], dtype=torch.float64), theta)[1]
    fd = (up - dn) / (2 * eps)
    assert abs(jac[0, 0].item() - fd.item()) / abs(fd.item()) < 1e-4


def test_gate_antitone_in_theta():
    p = torch.linspace(-0.5, 0.5, 11)
    prev = gate(p, -0.6)[0]
    for theta in (-0.3, 0.0, 0.2, 0.7):
        m, _ = gate(p, theta)
        assert (m <= prev + 1e-12).all()
        prev = m


def test_top_n_tie_breaks_row_major():
    p = torch.tensor([0.1, 0.9, 0.3, 0.9])
    assert top_n_indices(p, 2) == [1, 3]


def test_top_n_full_length_sorts_by_value():
    p = torch.tensor([0.2, 0.8, 0.5, 0.5])
    assert top_n_indices(p, 4) == [1, 2, 3, 0]


def test_top_n_against_brute_force_with_ties():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        length = int(rng.integers(2, 65))
        # quantized values to force frequent ties
        values = rng.integers(0, 5, size=length).astype(np.float64) / 4.0
        n = int(rng.integers(1, length + 1))
        p = torch.as_tensor(values)
        assert top_n_indices(p, n) == brute_force_top_n(values.tolist(), n)


def test_top_n_rejects_bad_n():
    with pytest.raises(ValueError):
        top_n_indices(torch.zeros(4), 5)
    with pytest.raises(ValueError):
        top_n_indices(torch.zeros(4), 0)


def test_select_regions_monotone_transform_invariance():
    rng = np.random.default_rng(5)
    p = torch.as_tensor(rng.standard_normal(64))
    base, _ = select_regions(p, 3, 64, (512, 512))
    squashed, _ = select_regions(torch.tanh(p * 0.1) + 2.0, 3, 64, (512, 512))
    assert base == squashed


def test_select_regions_coordinates_clamped():
    p = torch.zeros(16)
    p[0] = 1.0  # top-left cell
    p[15] = 0.5  # bottom-right cell
    coords, indices = select_regions(p, 2, 64, (256, 256))
    assert indices == [0, 15]
    assert coords[0] == (0, 0)  # center 32 - 32 = 0
    assert coords[1] == (192, 192)  # clamped to 256 - 64


def test_grid_to_pixel_centers():
    # 4x4 grid over 256px: cell (1, 2) centered at (96, 160)
    assert grid_to_pixel(6, (4, 4), (256, 256), 64) == (64, 128)


def test_select_regions_rejects_oversized_region():
    with pytest.raises(ValueError):
        select_regions(torch.zeros(16), 1, 300, (256, 256))


def test_crop_constant_image():
    image = torch.full((3, 128, 128), 0.7)
    crops = crop_regions(image, [(0, 0)], 64)
    assert crops[0].shape == (3, 64, 64)
    assert (crops[0] - 0.7).abs().max() == 0.0


def test_crop_matches_direct_indexing():
    ramp = torch.arange(128 * 128, dtype=torch.float32).reshape(1, 128, 128).repeat(3, 1, 1)
    (crop,) = crop_regions(ramp, [(17, 33)], 32)
    assert torch.equal(crop, ramp[:, 17:49, 33:65])


def test_overlapping_crops_share_pixels():
    image = torch.rand(3, 128, 128, generator=torch.Generator().manual_seed(4))
    a, b = crop_regions(image, [(0, 0), (0, 16)], 64)
    assert torch.equal(a[:, :, 16:], b[:, :, :48])


def test_fixed_region_anchors():
    assert fixed_region_coords((256, 256), 1, 64) == [(96, 96)]
    assert fixed_region_coords((256, 256), 2, 64) == [(96, 96), (32, 32)]
    assert fixed_region_coords((256, 256), 3, 64)[2] == (160, 160)


def test_selector_forward_pipeline():
    torch.manual_seed(0)
    selector = RegionSelector(channels=8, n_regions=2, region_size=64)
    x = torch.rand(3, 256, 256, generator=torch.Generator().manual_seed(9))
    emb, state, region_set = selector(x)
    assert state.attention.shape == (16, 16)
    assert (state.attention.sum(dim=1) - 1.0).abs().max() < 1e-5
    assert torch.allclose(state.gated_importance, state.gate * state.importance)
    assert len(region_set.regions) == 2
    assert region_set.regions[0].shape == (3, 64, 64)
    assert region_set.source_dims == (256, 256)
    # coords ordered by descending gated importance
    pg = state.gated_importance
    assert pg[region_set.grid_indices[0]] >= pg[region_set.grid_indices[1]]


def make_generic_tiny_selector(seed=1):
    """C'=2, L=4 selector with weights large enough that the value map
    varies across cells (default init leaves it nearly constant)."""
    torch.manual_seed(seed)
    selector = RegionSelector(channels=2, pool=4, n_regions=2, region_size=32,
                              theta=0.0).double()
    # 0.2 keeps the attention logits O(1): big enough that the value map
    # varies across cells, small enough that the softmax does not saturate
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in selector.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.2)
    x = torch.rand(3, 128, 128, generator=torch.Generator().manual_seed(seed + 1),
                   dtype=torch.float64)
    # center theta inside the importance range so the gate is not saturated
    with torch.no_grad():
        _, state, _ = selector(x)
        selector.theta = state.importance.mean().item()
    return selector, x


def gate_weighted_region_objective(selector, x):
    """Sum of selected-region pixel means weighted by the gate values."""
    _, state, region_set = selector(x)
    weights = state.gate[region_set.grid_indices]
    means = torch.stack([r.mean() for r in region_set.regions])
    return (weights * means).sum()


def test_gradient_reaches_query_and_key_encoders():
    selector, x = make_generic_tiny_selector()
    loss = gate_weighted_region_objective(selector, x)
    for encoder in (selector.query_encoder, selector.key_encoder):
        params = list(encoder.parameters())
        grads = torch.autograd.grad(loss, params, retain_graph=True,
                                    allow_unused=True)
        flat = torch.cat([g.flatten() for g in grads if g is not None])
        assert flat.abs().max() > 1e-8

        # finite differences against autograd on the largest-gradient weight
        best = max(
            ((p, g) for p, g in zip(params, grads) if g is not None),
            key=lambda pg: pg[1].abs().max(),
        )
        p, g = best
        idx = tuple(int(i) for i in (g.abs() == g.abs().max()).nonzero()[0])
        eps = 1e-6
        with torch.no_grad():
            p[idx] += eps
            up = gate_weighted_region_objective(selector, x).item()
            p[idx] -= 2 * eps
            dn = gate_weighted_region_objective(selector, x).item()
            p[idx] += eps
        fd = (up - dn) / (2 * eps)
        assert abs(fd - g[idx].item()) <= 1e-3 * max(abs(fd), abs(g[idx].item()))
