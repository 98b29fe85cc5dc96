import io

import pytest
import torch
from hypothesis import given, settings, strategies as st

from mar3d.nets import Discriminator, FeatureEncoder, NetConfig, UNetGenerator, build_networks, count_parameters


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([1, 3, 5]), st.integers(16, 40), st.integers(16, 40))
def test_generator_shape_and_bounds(n, h, w):
    torch.manual_seed(0)
    g = UNetGenerator(n, depth=2, width=4)
    torch.nn.init.normal_(g.head.weight, std=1.0)  # make the residual non-trivial
    x = torch.rand(2, n, h, w) * 2 - 1
    y = g(x)
    assert y.shape == x.shape
    assert y.min() >= -1 and y.max() <= 1
    assert torch.equal(y, g(x))


def test_generator_starts_as_identity():
    g = UNetGenerator(3, depth=2, width=4)
    x = torch.rand(1, 3, 24, 24) * 2 - 1
    assert torch.equal(g(x), x)


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        UNetGenerator(3)(torch.zeros(1, 5, 16, 16))
    with pytest.raises(ValueError):
        Discriminator(3)(torch.zeros(1, 5, 16, 16))
    with pytest.raises(ValueError):
        FeatureEncoder(3)(torch.zeros(1, 5, 16, 16))


def test_discriminator_probability():
    torch.manual_seed(1)
    d = Discriminator(3, (4, 8))
    x = torch.rand(4, 3, 32, 32) * 2 - 1
    p = d(x)
    assert p.shape == (4,)
    assert torch.all((p > 0) & (p < 1))
    assert torch.equal(p, d(x))


def test_discriminator_gradient_matches_finite_differences():
    torch.manual_seed(2)
    d = Discriminator(1, (2, 2)).double()
    assert count_parameters(d) < 1000
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    params = [p for p in d.parameters()]
    d.zero_grad()
    d(x).sum().backward()
    h = 1e-6
    for p in params:
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = d(x).item()
            flat[i] = old - h
            down = d(x).item()
            flat[i] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - grad[i].item()) <= 1e-3 * max(abs(fd), 1e-6) + 1e-9


def test_encoder_frozen_and_deterministic():
    f1, f2 = FeatureEncoder(3, seed=5), FeatureEncoder(3, seed=5)
    assert all(torch.equal(a, b) for a, b in zip(f1.parameters(), f2.parameters()))
    assert not any(p.requires_grad for p in f1.parameters())
    f1.train()
    assert not f1.training
    zero = torch.zeros(3, 3, 16, 16)
    out = f1(zero)
    assert torch.equal(out[0], out[1]) and torch.equal(out[0], out[2])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_encoder_separates_random_pairs(seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 16, 16, generator=gen) * 2 - 1
    b = a.clone()
    b[0, seed % 3, seed % 16, (seed // 16) % 16] += 0.05
    f = FeatureEncoder(3)
    assert torch.linalg.vector_norm(f(a) - f(b)) > 0
    assert torch.linalg.vector_norm(f(a) - f(a.clone())) == 0


def test_build_networks_independent_and_reproducible():
    cfg = NetConfig(n_slices=3, gen_width=8, disc_widths=(8, 8))
    a, b = build_networks(cfg, seed=4), build_networks(cfg, seed=4)
    for name in ("G_X", "G_Y", "D_X", "D_Y"):
        sa, sb = getattr(a, name).state_dict(), getattr(b, name).state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
    # same structure, different initial weights
    wx, wy = a.D_X.features[0].weight, a.D_Y.features[0].weight
    assert wx.shape == wy.shape and not torch.equal(wx, wy)
    assert count_parameters(a.G_X) == count_parameters(a.G_Y)


def test_state_dict_roundtrip_bit_exact():
    nets = build_networks(NetConfig(gen_width=8), seed=1)
    buf = io.BytesIO()
    torch.save(nets.G_Y.state_dict(), buf)
    buf.seek(0)
    loaded = torch.load(buf)
    assert all(torch.equal(loaded[k], v) for k, v in nets.G_Y.state_dict().items())


def test_config_hash_tracks_architecture():
    assert NetConfig().hash() == NetConfig().hash()
    assert NetConfig(n_slices=5).hash() != NetConfig().hash()
