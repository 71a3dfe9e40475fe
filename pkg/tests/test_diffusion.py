import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from isorec.checkpoint import state_checksum
from isorec.diffusion import (
    Denoiser,
    DenoiserConfig,
    PriorConfig,
    SamplingError,
    TrainedPrior,
    ancestral_sample,
    build_schedule,
    denoiser_loss,
    init_denoiser,
    perturb,
    train_denoiser,
)

from oracles import central_difference_grad, loop_alpha_bar

SMALL = PriorConfig(denoiser=DenoiserConfig(base=8, levels=1, t_dim=16), T=50, steps=20, batch_size=4, patch=8, log_every=5)


def test_schedule_first_step():
    s = build_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar[0] == 1.0


def test_schedule_terminal_matches_loop_oracle():
    s = build_schedule(1000, 1e-4, 0.02)
    oracle = loop_alpha_bar(1000, 1e-4, 0.02)
    assert abs(s.alpha_bar[1000] - oracle[-1]) / oracle[-1] < 1e-10
    assert s.alpha_bar[1000] == pytest.approx(4.0e-5, abs=1e-5)
    np.testing.assert_allclose(s.alpha_bar[1:], oracle, rtol=1e-10)


def test_schedule_invariants():
    s = build_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    np.testing.assert_allclose(s.alpha_bar[1:] / s.alpha_bar[:-1], s.alpha[1:], atol=1e-12)
    assert s.beta[1] == 1e-4 and s.beta[1000] == pytest.approx(0.02)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_perturb_branches():
    s = build_schedule()
    x0 = torch.rand(2, 1, 4, 4)
    z = torch.zeros_like(x0)
    assert torch.allclose(perturb(x0, 300, z, s), math.sqrt(s.alpha_bar[300]) * x0)
    eps = torch.randn_like(x0)
    assert torch.allclose(perturb(z, 300, eps, s), math.sqrt(1 - s.alpha_bar[300]) * eps)
    with pytest.raises(ValueError):
        perturb(x0, 300, torch.zeros(2, 1, 4, 5), s)
    with pytest.raises(ValueError):
        perturb(x0, 0, z, s)


@given(st.integers(1, 1000), st.floats(-2, 2), st.floats(-2, 2))
def test_perturb_affine_coefficients(t, x, e):
    s = build_schedule()
    out = perturb(np.array([x]), t, np.array([e]), s)[0]
    assert out == pytest.approx(math.sqrt(s.alpha_bar[t]) * x + math.sqrt(1 - s.alpha_bar[t]) * e, abs=1e-12)


def test_perturb_per_item_timesteps():
    s = build_schedule()
    x0 = torch.ones(3, 1, 2, 2)
    out = perturb(x0, torch.tensor([1, 500, 1000]), torch.zeros_like(x0), s)
    for i, t in enumerate([1, 500, 1000]):
        assert torch.allclose(out[i], torch.full((1, 2, 2), math.sqrt(s.alpha_bar[t])))


def test_perturb_monte_carlo():
    s = build_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, 16)
    t = 250
    eps = rng.standard_normal((10_000, 16))
    xt = perturb(np.broadcast_to(x0, eps.shape), t, eps, s)
    mean_err = np.abs(xt.mean(0) - math.sqrt(s.alpha_bar[t]) * x0)
    stderr = math.sqrt((1 - s.alpha_bar[t]) / 10_000)
    assert np.all(mean_err < 4 * stderr)
    np.testing.assert_allclose(xt.var(0, ddof=1), 1 - s.alpha_bar[t], rtol=0.05)


def test_loss_perfect_predictor_is_zero():
    s = build_schedule()
    eps = torch.randn(4, 1, 8, 8)
    x0 = torch.rand(4, 1, 8, 8)
    loss = denoiser_loss(lambda xt, t: eps, x0, s, torch.Generator(), eps=eps)
    assert float(loss) == 0.0


def test_loss_zero_predictor_is_unit():
    s = build_schedule()
    g = torch.Generator().manual_seed(0)
    x0 = torch.zeros(10_000, 1, 2, 2)
    loss = denoiser_loss(lambda xt, t: torch.zeros_like(xt), x0, s, g)
    assert float(loss) == pytest.approx(1.0, rel=0.05)


def test_loss_batch_order_invariant():
    s = build_schedule()
    model = init_denoiser(SMALL)
    x0 = torch.rand(6, 1, 8, 8)
    t = torch.tensor([1, 5, 9, 20, 40, 50])
    eps = torch.randn_like(x0)
    sched = build_schedule(50)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    a = denoiser_loss(model, x0, sched, None, t=t, eps=eps)
    b = denoiser_loss(model, x0[perm], sched, None, t=t[perm], eps=eps[perm])
    assert a.item() == pytest.approx(b.item(), rel=1e-6)
    with pytest.raises(ValueError):
        denoiser_loss(model, x0[:0], s, None)


def test_denoiser_shape_contract():
    for c in (1, 2):
        net = Denoiser(DenoiserConfig(channels=c, base=8, levels=2, t_dim=16))
        x = torch.randn(3, c, 16, 24)
        assert net(x, torch.tensor([1, 2, 3])).shape == x.shape
        assert net(x, 7).shape == x.shape


def test_denoiser_gradient_check():
    torch.manual_seed(0)
    net = Denoiser(DenoiserConfig(base=4, levels=1, t_dim=8)).double()
    x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    t = torch.tensor([3, 30])
    sched = build_schedule(50)

    def loss():
        return denoiser_loss(net, x0, sched, None, t=t, eps=eps)

    net.zero_grad()
    loss().backward()
    params = [net.out.weight, net.inp.bias, net.mid.conv1.weight]
    analytic = [p.grad.clone() for p in params]
    numeric = central_difference_grad(loss, params, h=1e-5)
    for a, n in zip(analytic, numeric):
        rel = torch.linalg.norm(a - n) / torch.clamp(torch.linalg.norm(n), min=1e-12)
        assert float(rel) < 1e-3


def test_train_zero_steps_is_init():
    cfg = PriorConfig(**{**SMALL.to_dict(), "denoiser": SMALL.denoiser, "steps": 0})
    prior = train_denoiser(np.random.rand(5, 1, 8, 8), cfg)
    assert state_checksum(prior.model) == state_checksum(init_denoiser(cfg))
    assert prior.losses == []


def test_train_is_seeded_and_decreases(tmp_path):
    rng = np.random.default_rng(0)
    # flat patches at 0 or 1: a learnable target for a few hundred steps
    patches = np.broadcast_to((rng.random((32, 1, 1, 1)) > 0.5), (32, 1, 8, 8)).astype(np.float32)
    cfg = PriorConfig(**{**SMALL.to_dict(), "denoiser": SMALL.denoiser, "steps": 150, "batch_size": 16, "lr": 3e-3})
    a = train_denoiser(patches, cfg)
    b = train_denoiser(patches, cfg)
    assert state_checksum(a.model) == state_checksum(b.model)
    first = np.mean([l for _, l in a.losses[:5]])
    last = np.mean([l for _, l in a.losses[-5:]])
    assert last < first
    assert [s for s, _ in a.losses] == list(range(5, 151, 5))
    a.save(tmp_path / "den")
    back = TrainedPrior.load(tmp_path / "den")
    x = torch.randn(2, 1, 8, 8)
    assert torch.equal(back.model(x, 4), a.model(x, 4))
    assert back.schedule.params() == a.schedule.params()


def test_train_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        train_denoiser(np.random.rand(4, 2, 8, 8), SMALL)


def test_sample_seeded():
    net = init_denoiser(SMALL)
    s = build_schedule(50)
    a = ancestral_sample(net, s, (2, 1, 8, 8), seed=3)
    b = ancestral_sample(net, s, (2, 1, 8, 8), seed=3)
    assert torch.equal(a, b)


def test_sample_zero_predictor_matches_recurrence():
    s = build_schedule(100)
    out = ancestral_sample(lambda x, t: torch.zeros_like(x), s, (1, 1, 2, 2), seed=11)
    g = torch.Generator().manual_seed(11)
    x = torch.randn((1, 1, 2, 2), generator=g).double().numpy().ravel()
    # replay the generator in the same draw order as the sampler
    x_cur = x.copy()
    for t in range(100, 0, -1):
        x_cur = x_cur / math.sqrt(1 - s.beta[t])
        if t > 1:
            z = torch.randn((1, 1, 2, 2), generator=g).double().numpy().ravel()
            x_cur = x_cur + math.sqrt(s.beta[t]) * z
    np.testing.assert_allclose(out.numpy().ravel(), x_cur, atol=1e-5, rtol=1e-5)


def test_sample_rejects_nan_weights():
    net = init_denoiser(SMALL)
    with torch.no_grad():
        net.out.weight.fill_(float("nan"))
    with pytest.raises(SamplingError):
        ancestral_sample(net, build_schedule(10), (1, 1, 8, 8), seed=0)
