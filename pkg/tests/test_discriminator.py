import math

import pytest
import torch

from multistylegan.discriminator import DiscriminatorConfig, NonLocalBlock, ResidualBlock, UNetDiscriminator, sequences_to_channels
from oracles import gradient_errors

TINY = DiscriminatorConfig(encoder_features=[8, 16, 16], decoder_features=[16, 8], nonlocal_stages=[1])


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    return UNetDiscriminator(TINY)


def test_tiny_shapes(tiny):
    out = tiny(torch.randn(3, 6, 32, 32))
    assert out.scalar.shape == (3,)
    assert out.pixel_map.shape == (3, 1, 32, 32)


@pytest.mark.parametrize("size", [4, 8, 20, 36])
def test_pixel_map_matches_input(tiny, size):
    out = tiny(torch.randn(1, 6, size, size))
    assert out.pixel_map.shape[-2:] == (size, size)


def test_indivisible_resolution(tiny):
    with pytest.raises(ValueError):
        tiny(torch.randn(1, 6, 30, 30))


def test_deterministic_forward(tiny):
    x = torch.randn(2, 6, 16, 16)
    a, b = tiny(x), tiny(x.clone())
    assert torch.equal(a.scalar, b.scalar) and torch.equal(a.pixel_map, b.pixel_map)


def test_samples_are_independent(tiny):
    x = torch.randn(4, 6, 16, 16)
    full = tiny(x)
    with torch.no_grad():
        for i in range(4):
            single = tiny(x[i : i + 1])
            assert torch.allclose(single.scalar, full.scalar[i : i + 1], atol=1e-5)
            assert torch.allclose(single.pixel_map, full.pixel_map[i : i + 1], atol=1e-5)
    other = x.clone()
    other[1:] = torch.randn(3, 6, 16, 16)
    assert torch.allclose(tiny(other).scalar[0], full.scalar[0], atol=1e-5)


def test_gradient_flows_to_input(tiny):
    x = torch.randn(2, 6, 16, 16, requires_grad=True)
    (g,) = torch.autograd.grad(tiny(x).scalar.sum(), x)
    assert g.abs().sum() > 0
    x2 = torch.randn(2, 6, 16, 16, requires_grad=True)
    (g2,) = torch.autograd.grad(tiny(x2).pixel_map.sum(), x2)
    assert g2.abs().sum() > 0


def test_channel_order():
    bf = torch.zeros(1, 3, 2, 2)
    gfp = torch.ones(1, 3, 2, 2)
    x = sequences_to_channels(bf, gfp)
    assert x[0, :3].sum() == 0 and x[0, 3:].sum() == 12


def test_config_validation():
    with pytest.raises(ValueError):
        DiscriminatorConfig(encoder_features=[8, 16], decoder_features=[8, 8])
    with pytest.raises(ValueError):
        DiscriminatorConfig(encoder_features=[8, 16], decoder_features=[8], nonlocal_stages=[5])


def test_residual_dead_branch():
    torch.manual_seed(0)
    block = ResidualBlock(3, 5, downsample=True)
    with torch.no_grad():
        for conv in (block.conv0, block.conv1):
            conv.weight.zero_()
            conv.bias.zero_()
    x = torch.randn(2, 3, 8, 8)
    assert torch.allclose(block(x), block.skip(torch.nn.functional.avg_pool2d(x, 2)) / math.sqrt(2), atol=1e-7)


def test_residual_downsample_shape():
    assert ResidualBlock(2, 4, downsample=True)(torch.randn(1, 2, 16, 16)).shape == (1, 4, 8, 8)
    assert ResidualBlock(2, 4)(torch.randn(1, 2, 16, 16)).shape == (1, 4, 16, 16)


def test_residual_gradient_check():
    torch.manual_seed(2)
    block = ResidualBlock(2, 2, downsample=True).double()
    with torch.no_grad():
        block.conv0.bias.normal_()
        block.conv1.bias.normal_()
    x = torch.randn(2, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    r = torch.randn(2, 2, 2, 2, dtype=torch.float64)

    def loss():
        return (block(x) * r).sum()

    tensors = {"input": x, "conv0": block.conv0.weight, "conv1": block.conv1.weight, "skip": block.skip.weight}
    errs = gradient_errors(loss, tensors)
    assert max(errs.values()) < 1e-4, errs


def test_nonlocal_identity_at_init():
    block = NonLocalBlock(8)
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(block(x), x)


def test_nonlocal_rows_are_distributions():
    block = NonLocalBlock(8)
    attn = block.attention_map(torch.randn(2, 8, 4, 4))
    assert attn.shape == (2, 16, 16)
    assert torch.allclose(attn.sum(-1), torch.ones(2, 16), atol=1e-6)


def test_nonlocal_single_position_hand_value():
    block = NonLocalBlock(1)
    with torch.no_grad():
        block.value.weight.fill_(0.5)
        block.out.weight.fill_(3.0)
        block.gamma.fill_(0.2)
    x = torch.tensor([[[[2.0]]]])
    # One position: attention is 1, so out = x + 0.2 * 3 * 0.5 * x = 2.6
    assert torch.allclose(block(x), torch.tensor([[[[2.6]]]]))


@pytest.mark.slow
def test_default_config_shapes():
    torch.manual_seed(0)
    d = UNetDiscriminator()
    with torch.no_grad():
        out = d(torch.randn(1, 6, 256, 256))
    assert out.scalar.shape == (1,)
    assert out.pixel_map.shape == (1, 1, 256, 256)
