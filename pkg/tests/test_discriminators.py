import torch

from avgan.discriminators import PatchDiscriminator, build_discriminators


def logits_side(d, side):
    return d(torch.rand(3, side, side)).shape[-1]


def test_d1_logits_shape_at_256():
    torch.manual_seed(0)
    d1, _ = build_discriminators(base_channels=8)
    logits = d1(torch.rand(3, 256, 256))
    assert logits.shape == (1, 30, 30)


def test_constant_input_gives_constant_interior_logits():
    torch.manual_seed(1)
    d1, _ = build_discriminators(base_channels=8)
    logits = d1(torch.full((3, 256, 256), 0.5))[0]
    interior = logits[5:-5, 5:-5]
    assert (interior - interior[0, 0]).abs().max() < 1e-5


def test_d2_contracts_spatially():
    torch.manual_seed(2)
    _, d2 = build_discriminators(base_channels=8)
    logits = d2(torch.rand(3, 64, 64))
    assert logits.shape[-1] < 64 and logits.shape[-2] < 64


def test_fully_convolutional_scaling():
    # out = side / 2^k - 2 for this stack, so doubling the side gives
    # 2 * out + 2
    torch.manual_seed(3)
    d1, d2 = build_discriminators(base_channels=8)
    assert logits_side(d1, 512) == 2 * logits_side(d1, 256) + 2
    assert logits_side(d2, 128) == 2 * logits_side(d2, 64) + 2


def test_d1_d2_parameters_disjoint():
    d1, d2 = build_discriminators(base_channels=8)
    assert not {id(p) for p in d1.parameters()} & {id(p) for p in d2.parameters()}


def test_depth_config():
    shallow = PatchDiscriminator(n_strided=2, base_channels=8)
    deep = PatchDiscriminator(n_strided=4, base_channels=8)
    assert logits_side(shallow, 256) > logits_side(deep, 256)
