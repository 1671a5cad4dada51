import pytest
import torch

from avgan.generators import Generator, build_generators


def test_g1_shape_and_range():
    torch.manual_seed(0)
    g1, _ = build_generators(base_channels=8, n_res_blocks=2, lowres_size=256,
                             region_size=64)
    out = g1(torch.rand(3, 256, 256))
    assert out.shape == (3, 256, 256)
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0


def test_g2_shape():
    torch.manual_seed(0)
    _, g2 = build_generators(base_channels=8, n_res_blocks=2, lowres_size=256,
                             region_size=64)
    out = g2(torch.rand(3, 64, 64))
    assert out.shape == (3, 64, 64)


def test_generator_rejects_wrong_working_size():
    g = Generator(base_channels=8, n_res_blocks=2, expected_size=128)
    with pytest.raises(ValueError):
        g(torch.rand(3, 64, 64))


def test_forward_deterministic():
    torch.manual_seed(1)
    g = Generator(base_channels=8, n_res_blocks=2)
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(2))
    assert torch.equal(g(x), g(x))


def test_unshared_parameters_are_disjoint():
    torch.manual_seed(0)
    g1, g2 = build_generators(base_channels=8, n_res_blocks=2)
    ids1 = {id(p) for p in g1.parameters()}
    ids2 = {id(p) for p in g2.parameters()}
    assert not ids1 & ids2
    assert len(ids1 | ids2) == len(ids1) + len(ids2)

    # perturbing a G1 parameter leaves G2 output bitwise unchanged
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(3))
    before = g2(x)
    with torch.no_grad():
        next(g1.parameters()).add_(0.5)
    assert torch.equal(g2(x), before)


def test_shared_generators_evaluate_one_store():
    torch.manual_seed(0)
    g1, g2 = build_generators(base_channels=8, n_res_blocks=2, shared=True)
    assert g1 is g2
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(4))
    before = g2(x)
    with torch.no_grad():
        next(g1.parameters()).add_(0.5)
    assert not torch.equal(g2(x), before)


def test_gradients_reach_every_parameter():
    torch.manual_seed(5)
    g = Generator(base_channels=8, n_res_blocks=2)
    x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(6))
    g(x).mean().backward()
    for name, p in g.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().sum() > 0, name


def test_encoder_features_four_depths():
    torch.manual_seed(7)
    g = Generator(base_channels=8, n_res_blocks=4)
    feats = g.encode_features(torch.rand(3, 64, 64))
    assert len(feats) == 4
    assert feats[0].shape == (8, 64, 64)
    assert feats[1].shape == (16, 32, 32)
    assert feats[2].shape == (32, 16, 16)
    assert feats[3].shape == (32, 16, 16)
