import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from refcolor.core_math import (
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    diffuse,
    diffuse_with_alpha_bar,
    diffusion_loss,
    initial_latent,
    make_noise_schedule,
    prior_noise_estimate,
    sample,
    sampling_timesteps,
)

floats = st.floats(-10, 10, allow_nan=False, width=32)


# -- schedule ------------------------------------------------------------------


def test_single_step_schedule():
    s = make_noise_schedule(1, 0.5, 0.5)
    assert s.T == 1
    assert s.alpha_bars.tolist() == [0.5]


def test_two_step_products():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=0, atol=1e-15)


def test_default_schedule_decreasing_and_small_at_end():
    s = make_noise_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 0.01
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))


def test_alpha_bars_match_running_product():
    s = make_noise_schedule(1000, 1e-4, 0.02)
    running = 1.0
    for t in range(s.T):
        running *= 1.0 - float(s.betas[t])
        assert abs(s.alpha_bars[t] - running) <= 1e-12 * running


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_noise_schedule(*args)


@pytest.mark.parametrize("betas", [[0.2, 0.1], [0.0, 0.1], [0.5, 1.0], []])
def test_schedule_rejects_bad_betas(betas):
    with pytest.raises(ValueError):
        NoiseSchedule(np.array(betas, dtype=np.float64))


def test_schedule_arrays_are_read_only():
    s = make_noise_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bars[0] = 0.3


# -- forward process -------------------------------------------------------------


def test_diffuse_limits():
    z0 = torch.randn(2, 4, 3, 3)
    eps = torch.randn(2, 4, 3, 3)
    assert torch.equal(diffuse_with_alpha_bar(z0, eps, 1.0), z0)
    assert torch.equal(diffuse_with_alpha_bar(z0, eps, 0.0), eps)


def test_diffuse_hand_value():
    out = diffuse_with_alpha_bar(torch.ones(1, 1), torch.zeros(1, 1), 0.25)
    assert out.item() == 0.5


def test_diffuse_uses_schedule():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    z0, eps = torch.ones(2, 1, dtype=torch.float64), torch.zeros(2, 1, dtype=torch.float64)
    out = diffuse(z0, eps, torch.tensor([0, 1]), s)
    np.testing.assert_allclose(out.squeeze().numpy(), [math.sqrt(0.9), math.sqrt(0.72)], rtol=1e-12)


def test_diffuse_errors():
    s = make_noise_schedule(10)
    with pytest.raises(ValueError):
        diffuse(torch.zeros(2, 3), torch.zeros(3, 2), 0, s)
    with pytest.raises(ValueError):
        diffuse(torch.zeros(2), torch.zeros(2), 10, s)
    with pytest.raises(ValueError):
        diffuse(torch.zeros(2), torch.zeros(2), -1, s)


def test_diffuse_variance_preservation():
    s = make_noise_schedule(1000)
    gen = torch.Generator().manual_seed(0)
    n = 10_000
    for t in (0, 250, 500, 999):
        z0 = torch.randn(n, generator=gen, dtype=torch.float64)
        eps = torch.randn(n, generator=gen, dtype=torch.float64)
        zt = diffuse(z0, eps, t, s)
        expected = s.alpha_bars[t] * 1.0 + (1 - s.alpha_bars[t])
        assert abs(zt.var().item() - expected) < 0.05 * expected


@given(a=floats, b=floats, t=st.integers(0, 99))
def test_diffuse_is_linear(a, b, t):
    s = make_noise_schedule(100)
    gen = torch.Generator().manual_seed(t)
    z1, z2, e1, e2 = (torch.randn(5, generator=gen, dtype=torch.float64) for _ in range(4))
    lhs = diffuse(a * z1 + b * z2, a * e1 + b * e2, t, s)
    rhs = a * diffuse(z1, e1, t, s) + b * diffuse(z2, e2, t, s)
    torch.testing.assert_close(lhs, rhs, rtol=1e-9, atol=1e-9)


# -- loss --------------------------------------------------------------------------


def test_loss_identity_and_offset():
    eps = torch.randn(3, 4, 5, 5)
    assert diffusion_loss(eps, eps).item() == 0.0
    torch.testing.assert_close(diffusion_loss(eps + 2, eps), torch.tensor(4.0))


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        diffusion_loss(torch.zeros(2, 2), torch.zeros(4))


def _central_difference(f, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        grad.reshape(-1)[i] = (f(plus.reshape(x.shape)) - f(minus.reshape(x.shape))) / (2 * h)
    return grad


def test_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(3)
    eps = torch.randn(4, generator=gen, dtype=torch.float64)
    eps_hat = torch.randn(4, generator=gen, dtype=torch.float64, requires_grad=True)
    diffusion_loss(eps_hat, eps).backward()
    fd = _central_difference(lambda x: diffusion_loss(x, eps).item(), eps_hat.detach())
    rel = (eps_hat.grad - fd).norm() / fd.norm()
    assert rel < 1e-4


@given(st.lists(floats, min_size=1, max_size=8))
def test_loss_non_negative(values):
    a = torch.tensor(values, dtype=torch.float64)
    assert diffusion_loss(a, torch.zeros_like(a)).item() >= 0


# -- guidance ------------------------------------------------------------------------


def test_cfg_identities():
    u, c = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    assert torch.equal(cfg_combine(u, c, 1.0), c)
    assert torch.equal(cfg_combine(u, c, 0.0), u)
    assert cfg_combine(torch.zeros(1), torch.ones(1), 2.5).item() == 2.5


def test_cfg_errors():
    with pytest.raises(ValueError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)
    with pytest.raises(ValueError):
        cfg_combine(torch.zeros(2), torch.zeros(2), -0.5)
    with pytest.raises(ValueError):
        GuidanceConfig(scale=-1)


@given(g1=st.floats(0, 10), g2=st.floats(0, 10), lam=st.floats(0, 1))
def test_cfg_is_affine_in_scale(g1, g2, lam):
    gen = torch.Generator().manual_seed(0)
    u, c = torch.randn(6, generator=gen, dtype=torch.float64), torch.randn(6, generator=gen, dtype=torch.float64)
    g = lam * g1 + (1 - lam) * g2
    mixed = lam * cfg_combine(u, c, g1) + (1 - lam) * cfg_combine(u, c, g2)
    torch.testing.assert_close(cfg_combine(u, c, g), mixed, rtol=1e-9, atol=1e-9)


@given(g=st.floats(0, 20))
def test_cfg_equal_branches(g):
    a = torch.linspace(-3, 3, 7, dtype=torch.float64)
    torch.testing.assert_close(cfg_combine(a, a, g), a, rtol=0, atol=1e-12)


# -- sampling --------------------------------------------------------------------------


def test_sampling_timesteps():
    ts = sampling_timesteps(1000, 50)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 50
    assert np.all(np.diff(ts) < 0)
    assert sampling_timesteps(10, 1).tolist() == [9]
    with pytest.raises(ValueError):
        sampling_timesteps(10, 11)
    with pytest.raises(ValueError):
        sampling_timesteps(10, 0)


def test_initial_latent_seeding():
    a = initial_latent((3, 2, 4, 4), 7)
    assert torch.equal(a[0], a[1]) and torch.equal(a[1], a[2])
    b = initial_latent((2, 2, 4, 4), [7, 8])
    assert torch.equal(b[0], a[0]) and not torch.equal(b[0], b[1])
    with pytest.raises(ValueError):
        initial_latent((2, 1), [1, 2, 3])


def _linear_denoiser(z, t, cond):
    return 0.3 * z + cond


def test_sample_deterministic():
    s = make_noise_schedule(100)
    runs = [sample(_linear_denoiser, 0.1, s, 10, GuidanceConfig(2.0, 0.0), 5, (2, 4, 4, 4)) for _ in range(2)]
    assert torch.equal(runs[0], runs[1])


def test_sample_zero_denoiser_one_step():
    s = make_noise_schedule(1000)
    shape = (1, 4, 8, 8)
    out = sample(lambda z, t, c: torch.zeros_like(z), None, s, 1, None, 11, shape)
    expected = initial_latent(shape, 11) / math.sqrt(s.alpha_bars[-1])
    torch.testing.assert_close(out, expected, rtol=1e-6, atol=0)


def test_sample_guidance_one_equals_unguided():
    s = make_noise_schedule(100)
    a = sample(_linear_denoiser, 0.2, s, 8, GuidanceConfig(1.0, 0.2), 3, (1, 2, 4, 4))
    b = sample(_linear_denoiser, 0.2, s, 8, None, 3, (1, 2, 4, 4))
    assert torch.equal(a, b)


def test_sample_same_across_batch_positions():
    s = make_noise_schedule(100)
    out = sample(_linear_denoiser, 0.0, s, 6, GuidanceConfig(3.0, 0.5), 9, (3, 2, 4, 4))
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_sample_errors():
    s = make_noise_schedule(10)
    with pytest.raises(ValueError):
        sample(_linear_denoiser, 0.0, s, 11, None, 0, (1, 1, 2, 2))
    with pytest.raises(ValueError):
        sample(lambda z, t, c: z[:, :1], None, s, 2, None, 0, (1, 2, 2, 2))


def _point_mass_denoiser(x_star, sched):
    ab = torch.tensor(sched.alpha_bars, dtype=torch.float64)

    def eps(z, t, cond):
        a = ab[t].reshape(-1, 1, 1, 1).to(z.dtype)
        return (z - a.sqrt() * x_star) / (1 - a).sqrt()

    return eps


@pytest.mark.parametrize("second_order", [False, True])
def test_sample_recovers_point_mass(second_order):
    s = make_noise_schedule(1000)
    x_star = torch.full((1, 1, 2, 2), 0.7)
    out = sample(_point_mass_denoiser(x_star, s), None, s, 5, None, 0, (1, 1, 2, 2), second_order=second_order)
    torch.testing.assert_close(out, x_star, rtol=0, atol=1e-4)


def test_second_order_converges_faster_on_gaussian_data():
    # data ~ N(0, s^2): the exact flow maps z_T to z_T * s / sqrt(a_T s^2 + 1 - a_T)
    sched = make_noise_schedule(1000)
    var = 0.25
    ab = torch.tensor(sched.alpha_bars, dtype=torch.float64)

    def eps(z, t, cond):
        a = ab[t].reshape(-1, 1, 1, 1).to(z.dtype)
        return (1 - a).sqrt() * z / (a * var + 1 - a)

    shape = (1, 1, 4, 4)
    exact = initial_latent(shape, 4) * math.sqrt(var) / math.sqrt(ab[-1].item() * var + 1 - ab[-1].item())
    err = {}
    for steps in (100, 1000):
        for order in (False, True):
            out = sample(eps, None, sched, steps, None, 4, shape, second_order=order)
            err[steps, order] = (out - exact).abs().max().item()
    assert err[100, True] < err[100, False]
    assert err[1000, True] < err[1000, False] / 10
    # first order shrinks about 10x per 10x steps, second order much faster
    assert err[100, True] / err[1000, True] > 30


# -- prior noise estimate -----------------------------------------------------------


@pytest.mark.parametrize("t", [0, 250, 999])
def test_prior_estimate_is_least_squares_under_gaussian_prior(t):
    sched = make_noise_schedule()
    gen = torch.Generator().manual_seed(t)
    z0 = torch.randn(200_000, generator=gen, dtype=torch.float64)
    eps = torch.randn(200_000, generator=gen, dtype=torch.float64)
    z_t = diffuse(z0, eps, t, sched)
    slope = float((z_t * eps).sum() / (z_t * z_t).sum())  # least-squares fit eps ~ c * z_t
    coeff = float(prior_noise_estimate(torch.ones(1, dtype=torch.float64), t, sched))
    assert coeff == pytest.approx(slope, abs=5e-3)
    assert coeff == pytest.approx(np.sqrt(1 - sched.alpha_bars[t]), rel=1e-12)


def test_prior_estimate_per_sample_timesteps():
    sched = make_noise_schedule()
    z = torch.ones(2, 3, 2, 2)
    out = prior_noise_estimate(z, torch.tensor([0, 999]), sched)
    assert torch.allclose(out[0], torch.full((3, 2, 2), float(np.sqrt(1 - sched.alpha_bars[0]))))
    assert torch.allclose(out[1], torch.full((3, 2, 2), float(np.sqrt(1 - sched.alpha_bars[999]))))
