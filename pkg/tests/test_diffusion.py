import math
import os

import numpy as np
import pytest

from dmquant.core import ConfigError, InputError, Rng, read_tensor
from dmquant.diffusion import (
    NoiseSchedule,
    OutputHooks,
    SamplerConfig,
    StepCapture,
    ddim_step,
    draw_noise,
    make_schedule,
    p_sample_ddpm,
    predict_x0_from_eps,
    q_posterior,
    q_sample,
    respace,
    sample,
)
from dmquant.quantizer import QuantParams
from dmquant.scorenet import ScoreNetwork

DATA = os.path.join(os.path.dirname(__file__), "data")


class ZeroNet:
    """Stub estimator predicting eps_hat = 0."""

    input_dim = 2

    def __init__(self):
        self.calls = 0

    def forward(self, x, t):
        self.calls += 1
        return np.zeros_like(x)


class OracleNet:
    """Returns a fixed eps regardless of input."""

    input_dim = 2

    def __init__(self, eps):
        self.eps = eps

    def forward(self, x, t):
        return self.eps


def small_net(T=20, seed=5):
    return ScoreNetwork.init(2, Rng(seed, stream=31), hidden_dims=(16, 16), time_embed_dim=8, T=T)


def test_constant_schedule_closed_form():
    s = make_schedule("constant", 50, beta=0.02)
    t = np.arange(51)
    np.testing.assert_allclose(s.alpha_bar, 0.98**t, rtol=1e-12)


@pytest.mark.parametrize("T", [2, 10, 100, 1000])
def test_cosine_end_small(T):
    def f(t):
        return math.cos(((t / T + 0.008) / 1.008) * math.pi / 2) ** 2

    s = make_schedule("cosine", T)
    assert s.alpha_bar[T] < 0.01 * s.alpha_bar[1]
    # before the 0.999 cap bites, alpha_bar follows f(t)/f(0)
    assert s.alpha_bar[1] == pytest.approx(f(1) / f(0), rel=1e-12)


def test_linear_endpoints():
    s = make_schedule("linear", 1000)
    assert s.beta[1] == pytest.approx(1e-4, rel=1e-12)
    assert s.beta[1000] == pytest.approx(0.02, rel=1e-12)
    s100 = make_schedule("linear", 100)
    assert s100.beta[1] == pytest.approx(1e-3) and s100.beta[100] == pytest.approx(0.2)


def test_schedule_errors():
    with pytest.raises(InputError):
        make_schedule("linear", 1)
    with pytest.raises(ConfigError):
        make_schedule("sigmoid", 10)
    with pytest.raises(ConfigError):
        make_schedule("constant", 10)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = make_schedule(kind, 100)
    b = s.beta[1:]
    assert np.all((b > 0) & (b < 1))
    ab = s.alpha_bar[1:]
    assert np.all(np.diff(s.alpha_bar) < 0) and np.all((ab > 0) & (ab < 1))
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(np.concatenate([[1.0], 1 - b])), rtol=1e-12)
    for t in range(2, 101):
        bt = (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]) * s.beta[t]
        assert s.beta_tilde[t] == pytest.approx(bt, rel=1e-12)
    assert s.beta_tilde[1] == s.beta[1]


def test_schedule_json_roundtrip():
    s = make_schedule("cosine", 30)
    back = NoiseSchedule.from_json(s.to_json())
    assert back.T == 30 and np.array_equal(back.alpha_bar, s.alpha_bar)


def test_q_sample_examples():
    s = make_schedule("linear", 100)
    x0 = np.array([[1.0, 0.0]])
    assert np.array_equal(q_sample(x0, 50, np.zeros((1, 2)), s), math.sqrt(s.alpha_bar[50]) * x0)
    eps = Rng(1).normal((1, 2))
    expect = math.sqrt(s.alpha_bar[50]) * x0 + math.sqrt(1 - s.alpha_bar[50]) * eps
    np.testing.assert_allclose(q_sample(x0, 50, eps, s), expect, rtol=0, atol=1e-15)
    tiny = make_schedule("constant", 10, beta=1e-12)
    np.testing.assert_allclose(q_sample(x0, 1, eps, tiny), x0, atol=1e-5)
    with pytest.raises(InputError):
        q_sample(x0, 101, eps, s)
    with pytest.raises(InputError):
        q_sample(x0, 3, np.zeros(3), s)


def test_q_sample_per_row_t():
    s = make_schedule("cosine", 40)
    rng = Rng(2)
    x0, eps = rng.normal((3, 2)), rng.normal((3, 2))
    t = np.array([1, 20, 40])
    rows = np.stack([q_sample(x0[i], int(t[i]), eps[i], s) for i in range(3)])
    assert np.array_equal(q_sample(x0, t, eps, s), rows)


def test_q_posterior_direct():
    s = make_schedule("constant", 5, beta=0.1)
    mean, var = q_posterior(np.array([1.0]), np.array([0.5]), 3, s)
    ab2, ab3 = 0.9**2, 0.9**3
    coef_x0 = math.sqrt(ab2) * 0.1 / (1 - ab3)
    coef_xt = math.sqrt(0.9) * (1 - ab2) / (1 - ab3)
    assert mean[0] == pytest.approx(coef_x0 * 1.0 + coef_xt * 0.5, rel=1e-12)
    assert var == pytest.approx((1 - ab2) / (1 - ab3) * 0.1, rel=1e-12)
    with pytest.raises(InputError):
        q_posterior(np.ones(1), np.ones(1), 1, s)


def test_q_posterior_coefficients_when_x0_equals_xt():
    s = make_schedule("constant", 8, beta=0.05)
    x = np.array([2.0])
    mean, _ = q_posterior(x, x, 4, s)
    a = 0.95
    expect = (math.sqrt(a**3) * 0.05 + math.sqrt(a) * (1 - a**3)) / (1 - a**4)
    assert mean[0] == pytest.approx(expect * 2.0, rel=1e-12)


def test_q_posterior_no_noise_step():
    s = NoiseSchedule.from_betas([0.1, 0.1, 1e-13])
    mean, var = q_posterior(np.array([3.0]), np.array([-1.0]), 3, s)
    assert mean[0] == pytest.approx(-1.0, abs=1e-10)
    assert var < 1e-12


def test_predict_x0():
    s = make_schedule("cosine", 100)
    rng = Rng(4)
    for _ in range(20):
        x0, eps = rng.normal((4, 2)), rng.normal((4, 2))
        t = 1 + int(rng.integers(100, 1)[0])
        xt = q_sample(x0, t, eps, s)
        got = predict_x0_from_eps(xt, t, eps, s)
        expect = (xt - math.sqrt(1 - s.alpha_bar[t]) * eps) / math.sqrt(s.alpha_bar[t])
        assert np.array_equal(got, expect)
        np.testing.assert_allclose(got, x0, atol=1e-6)
    xt = rng.normal((2, 2))
    np.testing.assert_allclose(predict_x0_from_eps(xt, 7, np.zeros((2, 2)), s), xt / math.sqrt(s.alpha_bar[7]))
    clipped = predict_x0_from_eps(100 * xt, 7, np.zeros((2, 2)), s, clip=1.0)
    assert np.abs(clipped).max() <= 1.0


def test_ddpm_mean_with_true_eps_is_posterior_mean():
    s = make_schedule("linear", 50)
    rng = Rng(8)
    x0, eps = rng.normal((5, 2)), rng.normal((5, 2))
    for t in (2, 17, 50):
        xt = q_sample(x0, t, eps, s)
        cap = StepCapture()
        p_sample_ddpm(OracleNet(eps), xt, t, s, noise=np.zeros((5, 2)), capture=cap)
        expect, _ = q_posterior(x0, xt, t, s)
        np.testing.assert_allclose(cap.mu[0], expect, rtol=1e-12, atol=1e-12)


def test_ddpm_last_step_is_deterministic():
    s = make_schedule("linear", 10)
    x = Rng(1).normal((3, 2))
    rng = Rng(0)
    a = p_sample_ddpm(small_net(10), x, 1, s, rng=rng)
    assert rng.draws == 0
    assert np.array_equal(a, p_sample_ddpm(small_net(10), x, 1, s))


def test_ddpm_noise_and_variance_modes():
    s = make_schedule("linear", 10)
    x = np.zeros((1, 2))
    z = np.array([[1.0, -1.0]])
    small = p_sample_ddpm(ZeroNet(), x, 5, s, noise=z)
    large = p_sample_ddpm(ZeroNet(), x, 5, s, noise=z, variance="fixed_large")
    np.testing.assert_allclose(small, math.sqrt(s.beta_tilde[5]) * z)
    np.testing.assert_allclose(large, math.sqrt(s.beta[5]) * z)
    with pytest.raises(ConfigError):
        p_sample_ddpm(ZeroNet(), x, 5, s, noise=z, variance="learned")
    with pytest.raises(InputError):
        p_sample_ddpm(ZeroNet(), x, 5, s)  # stochastic step with no noise source


def test_empty_hooks_change_nothing():
    s = make_schedule("cosine", 20)
    net = small_net()
    plan = draw_noise(Rng(1), 4, 2, SamplerConfig().stochastic_steps(s))
    a = sample(net, SamplerConfig(), 4, s, plan=plan).x
    b = sample(net, SamplerConfig(), 4, s, plan=plan, hooks=OutputHooks()).x
    assert np.array_equal(a, b)


def test_hooks_apply_quantization():
    s = make_schedule("constant", 20, beta=0.05)
    net = small_net()
    coarse = QuantParams(0.25, 0, 8, True)
    plan = draw_noise(Rng(1), 8, 2, SamplerConfig().stochastic_steps(s))
    x = sample(net, SamplerConfig(), 8, s, plan=plan, hooks=OutputHooks(x=coarse)).x
    np.testing.assert_allclose(x / 0.25, np.rint(x / 0.25), atol=1e-12)


def test_golden_trajectory():
    s = make_schedule("constant", 20, beta=0.05)
    b = sample(small_net(), SamplerConfig(), 6, s, Rng(3, stream=71), record_trajectory=True)
    with open(os.path.join(DATA, "golden_ddpm_trajectory.bin"), "rb") as fh:
        golden = read_tensor(fh)
    assert np.array_equal(np.stack(b.trajectory), golden)


def test_ddim_eta_zero_is_deterministic_and_draws_nothing():
    s = make_schedule("cosine", 20)
    net = small_net()
    x = Rng(2).normal((3, 2))
    rng = Rng(9)
    a = ddim_step(net, x, 10, 5, 0.0, s, rng=rng)
    assert rng.draws == 0
    assert np.array_equal(a, ddim_step(net, x, 10, 5, 0.0, s))


def test_ddim_to_zero_returns_x0_hat():
    s = make_schedule("cosine", 20)
    net = small_net()
    x = Rng(2).normal((3, 2))
    eps = net.forward(x, np.full(3, 4))
    np.testing.assert_array_equal(ddim_step(net, x, 4, 0, 0.0, s), predict_x0_from_eps(x, 4, eps, s))


def test_ddim_closed_form_with_zero_eps():
    s = make_schedule("constant", 10, beta=0.1)
    x = np.array([[1.5, -2.0]])
    out = ddim_step(ZeroNet(), x, 6, 3, 0.0, s)
    np.testing.assert_allclose(out, x * math.sqrt(0.9**3 / 0.9**6), rtol=1e-12)


def test_ddim_sigma_uses_noise():
    s = make_schedule("cosine", 20)
    x = np.zeros((1, 2))
    z = np.array([[1.0, 1.0]])
    a = ddim_step(ZeroNet(), x, 10, 5, 1.0, s, noise=z)
    ab_t, ab_p = s.alpha_bar[10], s.alpha_bar[5]
    sigma = math.sqrt((1 - ab_p) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_p)
    np.testing.assert_allclose(a, sigma * z, rtol=1e-12)


def test_ddim_errors():
    s = make_schedule("cosine", 20)
    x = np.zeros((1, 2))
    with pytest.raises(InputError):
        ddim_step(ZeroNet(), x, 5, 5, 0.0, s)
    with pytest.raises(InputError):
        ddim_step(ZeroNet(), x, 21, 5, 0.0, s)
    with pytest.raises(InputError):
        ddim_step(ZeroNet(), x, 5, 2, 1.5, s)


def test_respace_examples():
    assert respace(100, 100) == list(range(100, 0, -1))
    assert respace(100, 4) == [100, 75, 50, 25]
    assert respace(100, 1) == [100]
    ts = respace(10, 7)
    assert len(ts) == 7 and all(a > b for a, b in zip(ts, ts[1:])) and ts[-1] >= 1
    with pytest.raises(InputError):
        respace(10, 11)


def test_sampler_config():
    assert SamplerConfig().transitions(3) == [(3, 2), (2, 1), (1, 0)]
    assert SamplerConfig("ddim", 2).transitions(10) == [(10, 5), (5, 0)]
    with pytest.raises(ConfigError):
        SamplerConfig("ddpm", 5).transitions(10)
    with pytest.raises(ConfigError):
        SamplerConfig("euler").transitions(10)
    assert SamplerConfig(clip="data").resolve(2.5).clip == 2.5
    assert SamplerConfig(clip=1.0).resolve(2.5).clip == 1.0
    with pytest.raises(ConfigError):
        sample(ZeroNet(), SamplerConfig(clip="data"), 2, make_schedule("cosine", 5), Rng(0))


def test_sample_determinism_and_kinds():
    s = make_schedule("cosine", 20)
    net = small_net()
    a = sample(net, SamplerConfig(), 16, s, Rng(5))
    b = sample(net, SamplerConfig(), 16, s, Rng(5))
    assert np.array_equal(a.x, b.x)
    c = sample(net, SamplerConfig("ddim", 20, eta=0.0), 16, s, Rng(5))
    assert not np.array_equal(a.x, c.x)
    with pytest.raises(InputError):
        sample(net, SamplerConfig(), 0, s, Rng(5))


def test_sample_draw_order_is_sample_major():
    s = make_schedule("cosine", 20)
    net = small_net()
    one = sample(net, SamplerConfig(), 1, s, Rng(5)).x
    many = sample(net, SamplerConfig(), 5, s, Rng(5)).x
    assert np.array_equal(one[0], many[0])
    rng = Rng(5)
    plan = draw_noise(Rng(5), 2, 2, SamplerConfig().stochastic_steps(s))
    first = rng.normal((1 + 19, 2))
    assert np.array_equal(plan.x_T[0], first[0])
    assert np.array_equal(plan.noise[:19, 0], first[1:])
    assert np.all(plan.noise[19] == 0.0)


def test_trajectory_recording():
    s = make_schedule("cosine", 10)
    b = sample(small_net(10), SamplerConfig("ddim", 4), 3, s, Rng(1), record_trajectory=True)
    assert len(b.trajectory) == 5 and b.timesteps == [10, 8, 5, 2]
    assert np.array_equal(b.trajectory[-1], b.x)
