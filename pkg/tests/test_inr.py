import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from isorec.inr import FourierEmbedding, InrConfig, InrModel, fourier_embed, init_inr, inr_forward, query_slice
from isorec.volume import SlicePlan, expand_slice

from oracles import central_difference_grad

TINY = InrConfig(width=8, depth=2, embed_half=4, sigma_b=2.0, omega_first=3.0)


def test_embed_origin():
    emb = FourierEmbedding(16, 8.0, seed=0)
    f = fourier_embed([[0.0, 0.0, 0.0]], emb)[0]
    assert f.shape == (32,)
    assert torch.all(f[:16] == 0) and torch.all(f[16:] == 1)


def test_embed_single_row_closed_form():
    emb = FourierEmbedding(1, 1.0)
    emb.B.copy_(torch.tensor([[1.0, 0.0, 0.0]]))
    f = fourier_embed([[0.25, 0.9, -0.3]], emb)[0]
    np.testing.assert_allclose(f.numpy(), [1.0, 0.0], atol=1e-6)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_embed_pythagorean(c):
    emb = FourierEmbedding(32, 16.0, seed=3)
    f = fourier_embed([c], emb)[0].double()
    np.testing.assert_allclose((f[:32] ** 2 + f[32:] ** 2).numpy(), 1.0, atol=1e-6)
    assert torch.all(f.abs() <= 1)


def test_embed_distance_depends_on_projected_difference():
    emb = FourierEmbedding(8, 4.0, seed=1).double()
    rng = np.random.default_rng(0)
    for _ in range(20):
        c1, c2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        shift = rng.uniform(-0.3, 0.3, 3)
        d_a = torch.linalg.norm(emb(torch.tensor(np.array([c1]))) - emb(torch.tensor(np.array([c2]))))
        d_b = torch.linalg.norm(emb(torch.tensor(np.array([c1 + shift]))) - emb(torch.tensor(np.array([c2 + shift]))))
        assert float(d_a) == pytest.approx(float(d_b), abs=1e-9)
        # closed form: ||e1 - e2||^2 = sum_k 2 - 2 cos(2 pi B_k (c1 - c2))
        proj = 2 * math.pi * emb.B.numpy() @ (c1 - c2)
        assert float(d_a) ** 2 == pytest.approx(float(np.sum(2 - 2 * np.cos(proj))), abs=1e-9)


def test_embedding_is_not_trainable():
    model = init_inr(InrConfig(), seed=0)
    names = {n for n, _ in model.named_parameters()}
    assert not any("embedding" in n for n in names)
    assert model.embedding.out_dim == 64


def test_forward_shape_and_determinism():
    model = init_inr(InrConfig(channels=2), seed=1)
    coords = torch.rand(17, 3) * 2 - 1
    a, b = inr_forward(model, coords), inr_forward(model, coords.clone())
    assert a.shape == (17, 2)
    assert torch.equal(a, b)


def test_degenerate_network_constant():
    model = init_inr(InrConfig(channels=2), seed=0)
    with torch.no_grad():
        for layer in model.hidden:
            layer.linear.weight.zero_()
            layer.linear.bias.zero_()
        model.head.bias.copy_(torch.tensor([0.2, -0.7]))
    out = inr_forward(model, torch.rand(10, 3) * 2 - 1)
    np.testing.assert_allclose(out.detach().numpy(), [[0.2, -0.7]] * 10, atol=1e-7)


def test_seeded_init():
    a, b = init_inr(InrConfig(), 5), init_inr(InrConfig(), 5)
    for (na, ta), (nb, tb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(ta, tb)
    c = init_inr(InrConfig(), 6)
    assert not torch.equal(a.head.weight, c.head.weight)


def test_init_bounds():
    cfg = InrConfig()
    model = init_inr(cfg, 0)
    for i, layer in enumerate(model.hidden):
        fan_in = layer.linear.in_features
        bound = math.sqrt(6 / fan_in) / (cfg.omega_first if i == 0 else cfg.omega_hidden)
        assert layer.linear.weight.abs().max() <= bound


def test_first_layer_preactivation_unit_std():
    # Monte-Carlo over 10^4 random coordinates
    model = init_inr(InrConfig(), seed=0)
    coords = torch.rand(10_000, 3, generator=torch.Generator().manual_seed(0)) * 2 - 1
    with torch.no_grad():
        pre = model.hidden[0].preactivation(model.embedding(coords))
    assert 0.8 <= float(pre.std()) <= 1.2


@pytest.mark.parametrize("cfg", [InrConfig(), InrConfig.full_scale()])
def test_fresh_forward_finite(cfg):
    model = init_inr(cfg, 0)
    assert torch.all(torch.isfinite(inr_forward(model, torch.zeros(1, 3))))


def test_zero_width_rejected():
    with pytest.raises(ValueError):
        InrConfig(width=0)


def test_query_slice_matches_forward():
    model = init_inr(InrConfig(channels=2), 0)
    plan = SlicePlan("XY", 1, (3, 4, 4))
    img = query_slice(model, plan)
    assert img.shape == (4, 4, 2)
    flat = inr_forward(model, expand_slice(plan))
    assert torch.equal(img.reshape(-1, 2), flat)
    assert torch.equal(img, query_slice(model, plan))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 7), st.integers(0, 5), st.integers(0, 1000))
def test_orthogonal_queries_agree_exactly(i, j, seed):
    model = init_inr(InrConfig(width=16, depth=2), seed)
    dims = (12, 6, 8)
    zx = query_slice(model, SlicePlan("ZX", j, dims))
    zy = query_slice(model, SlicePlan("ZY", i, dims))
    assert torch.equal(zx[:, i], zy[:, j])


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = init_inr(TINY, seed=3).double()
    plan = SlicePlan("ZX", 1, (4, 3, 3))
    target = torch.rand(4, 3, 1, dtype=torch.float64)

    def loss():
        return ((query_slice(model, plan) - target) ** 2).sum()

    model.zero_grad()
    loss().backward()
    analytic = [p.grad.clone() for p in model.parameters()]
    numeric = central_difference_grad(loss, list(model.parameters()), h=1e-4)
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-6)
        assert float(((a - n).abs() / denom).max()) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    model = init_inr(InrConfig(channels=2), 4)
    model.save(tmp_path / "inr", step=12)
    back, meta = InrModel.load(tmp_path / "inr")
    assert meta["step"] == 12 and meta["seed"] == 4
    coords = torch.rand(5, 3)
    assert torch.equal(inr_forward(model, coords), inr_forward(back, coords))
