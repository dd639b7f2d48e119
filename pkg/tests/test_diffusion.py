import math

import numpy as np
import pytest
import torch

from diffretinex.diffusion import (
    content_loss,
    diffusion_loss,
    estimate_x0,
    estimate_x0_batch,
    make_linear_schedule,
    p_sample,
    posterior_mean,
    q_sample,
    q_sample_batch,
    q_sample_step,
    sample_loop,
    schedule_from_betas,
    total_diffusion_loss,
)
from diffretinex.errors import ConfigError, InputError, NumericError
from helpers import analytic_grad, finite_diff_grad, max_rel_err


def running_product(alpha):
    """Independent oracle for alpha_bar."""
    out, acc = [], 1.0
    for a in alpha:
        acc *= a
        out.append(acc)
    return np.array(out)


# --------------------------------------------------------------------------
# Schedules
# --------------------------------------------------------------------------


def test_linear_schedule_T4():
    s = make_linear_schedule(4, 0.1, 0.4)
    assert np.allclose(s.beta, [0.1, 0.2, 0.3, 0.4])
    assert np.allclose(s.alpha, [0.9, 0.8, 0.7, 0.6])
    assert np.allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024])
    assert np.allclose(s.alpha_bar, running_product(s.alpha))


def test_schedule_T1_first_step_variance_zero():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert np.allclose(s.alpha_bar, [0.5])
    assert s.sigma2[0] == 0.0


def test_default_schedule_tail():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[999] < 1e-4
    assert np.allclose(s.alpha_bar, running_product(s.alpha), rtol=1e-12)


def test_schedule_product_identity():
    s = make_linear_schedule(200, 1e-4, 0.02)
    lhs = s.alpha_bar[1:]
    rhs = s.alpha_bar[:-1] * s.alpha[1:]
    assert np.max(np.abs(lhs - rhs)) <= 1e-12
    assert s.sigma2[0] == 0.0 and np.all(s.sigma2[1:] > 0)


def test_schedule_log_telescoping():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert abs(np.sum(np.log(s.alpha)) - math.log(s.alpha_bar[-1])) < 1e-10


@pytest.mark.parametrize(
    "T,b0,b1",
    [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0), (10, -0.1, 0.2)],
)
def test_schedule_invalid(T, b0, b1):
    with pytest.raises(ConfigError):
        make_linear_schedule(T, b0, b1)


# --------------------------------------------------------------------------
# Forward process
# --------------------------------------------------------------------------


def test_q_sample_zero_x0():
    s = make_linear_schedule(4, 0.1, 0.4)
    eps = np.random.default_rng(0).normal(size=(4, 4, 3))
    out = q_sample(np.zeros((4, 4, 3)), 2, eps, s)
    assert np.allclose(out, math.sqrt(1 - 0.504) * eps)


def test_q_sample_zero_eps():
    s = make_linear_schedule(4, 0.1, 0.4)
    x0 = np.random.default_rng(1).random((4, 4, 3))
    out = q_sample(x0, 2, np.zeros_like(x0), s)
    assert np.allclose(out, math.sqrt(0.504) * x0)


def test_q_sample_out_of_range():
    s = make_linear_schedule(4, 0.1, 0.4)
    with pytest.raises(InputError):
        q_sample(np.zeros((2, 2, 1)), 4, np.zeros((2, 2, 1)), s)
    with pytest.raises(InputError):
        q_sample(np.zeros((2, 2, 1)), -1, np.zeros((2, 2, 1)), s)


def test_q_sample_step_shrinkage_and_near_identity():
    s = make_linear_schedule(4, 0.1, 0.4)
    x = np.random.default_rng(2).random((3, 3, 1))
    assert np.allclose(q_sample_step(x, 1, np.zeros_like(x), s), math.sqrt(0.8) * x)
    tiny = schedule_from_betas(np.array([1e-12]))
    assert np.max(np.abs(q_sample_step(x, 0, np.zeros_like(x), tiny) - x)) < 1e-9


def test_marginal_consistency_monte_carlo():
    """Iterating single steps matches the closed form within 3 standard errors."""
    s = make_linear_schedule(8, 0.05, 0.3)
    rng = np.random.default_rng(42)
    x0 = rng.random((4, 4))
    n = 10_000
    x = np.broadcast_to(x0, (n, 4, 4)).copy()
    for t in range(s.T):
        x = q_sample_step(x, t, rng.normal(size=x.shape), s)
    t_final = s.T - 1
    expected_mean = math.sqrt(s.alpha_bar[t_final]) * x0
    expected_std = math.sqrt(1 - s.alpha_bar[t_final])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    se_mean = expected_std / math.sqrt(n)
    se_std = expected_std / math.sqrt(2 * n)
    assert np.max(np.abs(mean - expected_mean)) < 3 * se_mean
    assert np.max(np.abs(std - expected_std)) < 3 * se_std


# --------------------------------------------------------------------------
# x0 estimation and posterior
# --------------------------------------------------------------------------


def test_estimate_x0_inverts_q_sample():
    s = make_linear_schedule(4, 0.1, 0.4)
    rng = np.random.default_rng(3)
    x0 = rng.random((4, 4, 3)) * 2 - 1
    eps = rng.normal(size=x0.shape)
    for t in range(4):
        x_t = q_sample(x0, t, eps, s)
        assert np.max(np.abs(estimate_x0(x_t, eps, t, s) - x0)) < 1e-5


def test_estimate_x0_zero_eps_hat_unclamped():
    s = make_linear_schedule(4, 0.1, 0.4)
    x_t = np.full((2, 2, 1), 3.0)
    out = estimate_x0(x_t, np.zeros_like(x_t), 2, s)
    assert np.allclose(out, 3.0 / math.sqrt(0.504))
    clamped = torch.from_numpy(np.asarray(out))
    assert estimate_x0(torch.from_numpy(x_t), torch.zeros(2, 2, 1, dtype=torch.float64), 2, s, clamp=True).max() <= 1.0
    assert clamped.max() > 1.0


def test_estimate_x0_closed_form_oracle():
    """Independent symbolic substitution at t=2 of the T=4 schedule."""
    s = make_linear_schedule(4, 0.1, 0.4)
    rng = np.random.default_rng(4)
    x0 = rng.random((4, 4)) * 2 - 1
    eps = rng.normal(size=(4, 4))
    ab = 0.9 * 0.8 * 0.7  # hand product up to t=2
    x_t = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    expected = (x_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert np.allclose(estimate_x0(x_t, eps, 2, s), expected, atol=1e-12)
    assert np.allclose(expected, x0, atol=1e-10)


def test_estimate_x0_underflow_raises():
    s = schedule_from_betas(np.full(16, 0.99))
    x = np.zeros((2, 2, 1))
    with pytest.raises(NumericError):
        estimate_x0(x, x, 15, s)


def test_posterior_mean_zero_eps_hat():
    s = make_linear_schedule(4, 0.1, 0.4)
    x_t = np.random.default_rng(5).random((3, 3, 1))
    assert np.allclose(posterior_mean(x_t, np.zeros_like(x_t), 1, s), x_t / math.sqrt(0.8))


def test_posterior_mean_no_noise_limit():
    # beta_t -> 0 at fixed accumulated noise level: the step becomes an identity
    s = schedule_from_betas(np.array([0.5, 1e-8]))
    x_t = np.random.default_rng(6).random((4, 4, 1))
    eps = np.random.default_rng(7).normal(size=x_t.shape)
    assert np.max(np.abs(posterior_mean(x_t, eps, 1, s) - x_t)) < 1e-6


def test_posterior_one_step_perfect_recovery():
    """With T=1 and the exact noise, the reverse step returns x0 exactly."""
    s = make_linear_schedule(1, 0.5, 0.5)
    rng = np.random.default_rng(8)
    x0 = rng.random((4, 4, 3)) * 2 - 1
    eps = rng.normal(size=x0.shape)
    x_1 = q_sample(x0, 0, eps, s)
    recovered = p_sample(x_1, eps, 0, s, z=None)
    assert np.max(np.abs(recovered - x0)) < 1e-12


def test_posterior_printed_form_differs():
    s = make_linear_schedule(10, 0.01, 0.2)
    rng = np.random.default_rng(9)
    x_t = rng.random((3, 3, 1))
    eps = rng.normal(size=x_t.shape)
    standard = posterior_mean(x_t, eps, 5, s)
    printed = posterior_mean(x_t, eps, 5, s, printed_form=True)
    assert not np.allclose(standard, printed)


# --------------------------------------------------------------------------
# Reverse sampling
# --------------------------------------------------------------------------


def test_p_sample_t0_returns_mean():
    s = make_linear_schedule(4, 0.1, 0.4)
    x = np.random.default_rng(10).random((2, 2, 1))
    eps = np.zeros_like(x)
    assert np.allclose(p_sample(x, eps, 0, s, z=np.ones_like(x)), posterior_mean(x, eps, 0, s))


def test_p_sample_variance_monte_carlo():
    s = make_linear_schedule(8, 0.05, 0.3)
    t = 5
    rng = np.random.default_rng(11)
    x_t = np.zeros((10_000, 1))
    draws = p_sample(x_t, np.zeros_like(x_t), t, s, z=rng.normal(size=x_t.shape))
    mu = posterior_mean(np.zeros((1,)), np.zeros((1,)), t, s)[0]
    var = draws.var()
    se_var = s.sigma2[t] * math.sqrt(2.0 / (draws.size - 1))
    assert abs(draws.mean() - mu) < 3 * math.sqrt(s.sigma2[t] / draws.size)
    assert abs(var - s.sigma2[t]) < 3 * se_var


def _oracle_denoiser(x0: torch.Tensor, s):
    """Returns the noise consistent with x_t and the known x0 at every step."""

    def denoiser(x_t, condition, t):
        ab = s.alpha_bar[t]
        return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)

    return denoiser


def test_sample_loop_oracle_denoiser_recovers_x0():
    s = make_linear_schedule(50, 1e-4, 0.02)
    gen = torch.Generator().manual_seed(123)
    x0 = torch.rand(1, 3, 8, 8, generator=gen) * 2 - 1
    cond = torch.zeros(1, 3, 8, 8)
    out = sample_loop(cond, _oracle_denoiser(x0, s), s, seed=7, target_channels=3)
    assert float((out - x0).abs().max()) < 0.05


def test_sample_loop_deterministic():
    s = make_linear_schedule(10, 1e-3, 0.05)
    cond = torch.zeros(2, 1, 8, 8)

    def denoiser(x_t, condition, t):
        return 0.5 * x_t

    a = sample_loop(cond, denoiser, s, seed=3, target_channels=1)
    b = sample_loop(cond, denoiser, s, seed=3, target_channels=1)
    c = sample_loop(cond, denoiser, s, seed=4, target_channels=1)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sample_loop_shape_and_range():
    s = make_linear_schedule(5, 1e-3, 0.05)
    cond = torch.zeros(2, 3, 8, 12)
    out = sample_loop(cond, lambda x, c, t: torch.zeros_like(x), s, seed=0, target_channels=1)
    assert out.shape == (2, 1, 8, 12)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_sample_loop_bad_denoiser_shape():
    s = make_linear_schedule(3, 1e-3, 0.05)
    cond = torch.zeros(1, 1, 8, 8)
    with pytest.raises(ConfigError):
        sample_loop(cond, lambda x, c, t: x[..., :4], s, seed=0, target_channels=1)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def test_diffusion_loss_cases():
    rng = np.random.default_rng(12)
    eps = rng.normal(size=(4, 4, 3))
    assert diffusion_loss(eps, eps) == 0.0
    assert np.isclose(diffusion_loss(eps, eps + 0.2), 0.2)
    other = rng.normal(size=eps.shape)
    assert np.isclose(diffusion_loss(eps, other), np.abs(eps - other).mean())
    with pytest.raises(InputError):
        diffusion_loss(eps, eps[:2])


def test_content_loss_cases():
    rng = np.random.default_rng(13)
    x0 = rng.random((4, 4, 1))
    assert content_loss(x0, x0) == 0.0
    assert np.isclose(content_loss(x0, x0 - 0.2), 0.2)
    other = rng.random(x0.shape)
    assert np.isclose(content_loss(x0, other), np.abs(x0 - other).mean())


def test_total_diffusion_loss():
    assert total_diffusion_loss(0.3, 0.2, 0.5) == pytest.approx(0.4)
    assert total_diffusion_loss(0.7, 0.0, 1.0) == pytest.approx(0.7)
    import inspect

    default = inspect.signature(total_diffusion_loss).parameters["gamma_ct"].default
    assert default == 1.0


def test_loss_gradients_match_finite_differences():
    s = make_linear_schedule(4, 0.1, 0.4)
    gen = torch.Generator().manual_seed(14)
    eps = (torch.rand(4, 4, generator=gen, dtype=torch.float64) - 0.5)
    eps_hat = (torch.rand(4, 4, generator=gen, dtype=torch.float64) - 0.5)

    an = analytic_grad(lambda e: diffusion_loss(eps, e), eps_hat)
    fd = finite_diff_grad(lambda: diffusion_loss(eps, eps_hat), eps_hat)
    assert max_rel_err(an, fd) < 1e-4

    x0 = torch.rand(4, 4, generator=gen, dtype=torch.float64)
    an = analytic_grad(lambda r: content_loss(x0, r), eps_hat)
    fd = finite_diff_grad(lambda: content_loss(x0, eps_hat), eps_hat)
    assert max_rel_err(an, fd) < 1e-4


# --------------------------------------------------------------------------
# Batched helpers match the scalar forms
# --------------------------------------------------------------------------


def test_batched_helpers_match_scalar():
    s = make_linear_schedule(6, 0.05, 0.3)
    gen = torch.Generator().manual_seed(15)
    x0 = torch.rand(4, 2, 3, 3, generator=gen)
    eps = torch.randn(4, 2, 3, 3, generator=gen)
    t = torch.tensor([0, 2, 5, 3])
    batched = q_sample_batch(x0, t, eps, s)
    for i in range(4):
        scalar = q_sample(x0[i], int(t[i]), eps[i], s)
        assert torch.allclose(batched[i], scalar)
    est = estimate_x0_batch(batched, eps, t, s)
    for i in range(4):
        scalar = estimate_x0(batched[i], eps[i], int(t[i]), s)
        assert torch.allclose(est[i], scalar, atol=1e-5)
