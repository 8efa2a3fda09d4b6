"""Noise schedules, the forward process, and DDPM/DDIM reverse samplers.

Schedule arrays have length ``T + 1`` and are indexed by timestep directly;
index 0 carries the ``alpha_bar[0] = 1`` convention so that ``t = 0`` means
clean data.

Random draws in :func:`sample` follow a fixed per-sample-major order: sample
``i`` takes its ``x_T`` and then the noise for every stochastic step before
sample ``i + 1`` draws anything. The batch is then denoised together.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from dmquant.core import ConfigError, InputError
from dmquant.quantizer import quant_dequant

CLIP_IMAGE = 1.0


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    post_coef_x0: np.ndarray
    post_coef_xt: np.ndarray

    @classmethod
    def from_betas(cls, betas, kind="custom"):
        betas = np.asarray(betas, dtype=np.float64)
        T = betas.size
        if T < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise InputError("betas must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.empty(T + 1)
        alpha_bar[0] = 1.0
        for t in range(1, T + 1):
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
        prev = alpha_bar[:-1]
        cur = alpha_bar[1:]
        beta_tilde = np.zeros(T + 1)
        beta_tilde[1:] = (1.0 - prev) / (1.0 - cur) * beta[1:]
        beta_tilde[1] = beta[1]
        coef_x0 = np.zeros(T + 1)
        coef_xt = np.zeros(T + 1)
        coef_x0[1:] = np.sqrt(prev) * beta[1:] / (1.0 - cur)
        coef_xt[1:] = np.sqrt(alpha[1:]) * (1.0 - prev) / (1.0 - cur)
        return cls(kind, T, beta, alpha, alpha_bar, beta_tilde, coef_x0, coef_xt)

    def to_json(self):
        return {"kind": self.kind, "T": self.T, "betas": [float(b) for b in self.beta[1:]]}

    @classmethod
    def from_json(cls, d):
        sched = cls.from_betas(d["betas"], kind=d["kind"])
        if sched.T != d["T"]:
            raise InputError("schedule T does not match its betas")
        return sched


def make_schedule(kind, T, beta=None):
    """``kind`` is ``linear``, ``cosine`` or ``constant`` (with ``beta``)."""
    if T < 2:
        raise InputError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T)
        return NoiseSchedule.from_betas(np.minimum(betas, 0.999), kind)
    if kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
        return NoiseSchedule.from_betas(betas, kind)
    if kind == "constant":
        if beta is None:
            raise ConfigError("constant schedule needs beta")
        return NoiseSchedule.from_betas(np.full(T, float(beta)), kind)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _coef(arr, t, x):
    """Per-row coefficient for scalar or per-row ``t``, broadcastable against ``x``."""
    c = arr[t]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def _check_t(t, lo, hi):
    tt = np.asarray(t)
    if tt.size and (tt.min() < lo or tt.max() > hi):
        raise InputError(f"timestep outside [{lo}, {hi}]")


def q_sample(x0, t, eps, sched):
    """Draw of ``x_t`` given ``x0``; ``t`` may be a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InputError("eps must match x0 in shape")
    _check_t(t, 0, sched.T)
    ab = sched.alpha_bar
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * eps


def q_posterior(x0, xt, t, sched):
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``."""
    _check_t(t, 2, sched.T)
    mean = _coef(sched.post_coef_xt, t, xt) * xt + _coef(sched.post_coef_x0, t, x0) * x0
    return mean, float(sched.beta_tilde[t]) if np.ndim(t) == 0 else sched.beta_tilde[t]


def predict_x0_from_eps(xt, t, eps_hat, sched, clip=None):
    _check_t(t, 1, sched.T)
    ab = sched.alpha_bar
    x0 = (xt - _coef(np.sqrt(1.0 - ab), t, xt) * eps_hat) / _coef(np.sqrt(ab), t, xt)
    if clip is not None:
        x0 = np.clip(x0, -clip, clip)
    return x0


@dataclass(frozen=True)
class OutputHooks:
    """Quantization applied to the sampler's mean, variance and sampled state."""

    mu: object = None
    sigma: object = None
    x: object = None

    def enabled(self):
        return self.mu is not None or self.sigma is not None or self.x is not None


@dataclass
class StepCapture:
    """Accumulates the per-step mean, variance and next state tensors."""

    mu: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    x: list = field(default_factory=list)

    def pooled(self, name):
        parts = getattr(self, name)
        return np.concatenate([p.reshape(-1) for p in parts]) if parts else np.zeros(0)


def _finish_step(mean, var, noise, hooks, capture):
    """Apply hooks to (mean, variance, sample) in that order and form ``x_{t-1}``."""
    sigma = np.full(mean.shape, var) if np.ndim(var) == 0 else np.broadcast_to(var, mean.shape).copy()
    if capture is not None:
        capture.mu.append(mean.copy())
        capture.sigma.append(sigma.copy())
    if hooks is not None and hooks.mu is not None:
        mean = quant_dequant(mean, hooks.mu)
    if hooks is not None and hooks.sigma is not None:
        sigma = np.maximum(quant_dequant(sigma, hooks.sigma), 0.0)
    x = mean if noise is None else mean + np.sqrt(sigma) * noise
    if capture is not None:
        capture.x.append(x.copy())
    if hooks is not None and hooks.x is not None:
        x = quant_dequant(x, hooks.x)
    return x


def _step_noise(rng, noise, shape):
    if noise is not None:
        return noise
    if rng is None:
        raise InputError("a stochastic step needs rng or explicit noise")
    return rng.normal(shape)


def p_sample_ddpm(net, xt, t, sched, rng=None, noise=None, hooks=None,
                  variance="fixed_small", clip=None, capture=None):
    """One ancestral step ``x_t -> x_{t-1}``; the step from ``t = 1`` adds no noise."""
    _check_t(t, 1, sched.T)
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = net.forward(xt, np.full(xt.shape[0], t))
    x0_hat = predict_x0_from_eps(xt, t, eps_hat, sched, clip)
    if t == 1:
        mean = sched.post_coef_xt[1] * xt + sched.post_coef_x0[1] * x0_hat
        return _finish_step(mean, float(sched.beta_tilde[1]), None, hooks, capture)
    mean, var = q_posterior(x0_hat, xt, t, sched)
    if variance == "fixed_large":
        var = float(sched.beta[t])
    elif variance != "fixed_small":
        raise ConfigError(f"unknown variance mode {variance!r}")
    z = _step_noise(rng, noise, xt.shape)
    return _finish_step(mean, var, z, hooks, capture)


def ddim_sigma(sched, t, t_prev, eta):
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


def ddim_step(net, xt, t, t_prev, eta, sched, rng=None, noise=None, hooks=None,
              clip=None, capture=None):
    """Implicit-sampler update ``x_t -> x_{t_prev}``; ``eta = 0`` is deterministic."""
    if not (0 <= t_prev < t <= sched.T):
        raise InputError(f"invalid DDIM transition {t} -> {t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise InputError("eta must lie in [0, 1]")
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = net.forward(xt, np.full(xt.shape[0], t))
    x0_hat = predict_x0_from_eps(xt, t, eps_hat, sched, clip)
    ab_prev = sched.alpha_bar[t_prev]
    sigma = ddim_sigma(sched, t, t_prev, eta)
    mean = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    z = _step_noise(rng, noise, xt.shape) if sigma > 0.0 else None
    return _finish_step(mean, sigma**2, z, hooks, capture)


def respace(T, num_steps):
    """Uniformly strided decreasing timesteps ``[T, ..., t_last]``; the last step targets 0."""
    if not 1 <= num_steps <= T:
        raise InputError(f"num_steps must be in [1, {T}], got {num_steps}")
    ts = [int(round(T * (1.0 - k / num_steps))) for k in range(num_steps)]
    for k in range(1, num_steps):
        if ts[k] >= ts[k - 1]:
            ts[k] = ts[k - 1] - 1
    return ts


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddpm"
    num_steps: int | None = None
    eta: float = 0.0
    variance: str = "fixed_small"
    clip: float | str | None = None  # "data": resolve against the training set's bound

    def resolve(self, data_bound):
        """Copy with ``clip="data"`` replaced by ``data_bound``."""
        if self.clip == "data":
            return replace(self, clip=float(data_bound))
        return self

    def check(self):
        if isinstance(self.clip, str):
            raise ConfigError(f"sampler clip {self.clip!r} must be resolved to a number first")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("sampler clip must be positive")

    def transitions(self, T):
        """List of ``(t, t_prev)`` pairs the sampler walks."""
        if self.kind == "ddpm":
            if self.num_steps not in (None, T):
                raise ConfigError("DDPM sampling requires num_steps == T")
            return [(t, t - 1) for t in range(T, 0, -1)]
        if self.kind == "ddim":
            ts = respace(T, self.num_steps or T)
            return list(zip(ts, ts[1:] + [0]))
        raise ConfigError(f"unknown sampler kind {self.kind!r}")

    def stochastic_steps(self, sched):
        """Flags marking which transitions consume noise."""
        flags = []
        for t, t_prev in self.transitions(sched.T):
            if self.kind == "ddpm":
                flags.append(t >= 2)
            else:
                flags.append(ddim_sigma(sched, t, t_prev, self.eta) > 0.0)
        return flags


@dataclass
class NoisePlan:
    x_T: np.ndarray
    noise: np.ndarray  # (num_transitions, n, dim); zero where a step draws nothing


def draw_noise(rng, n, dim, flags):
    """All randomness for ``n`` chains, drawn sample-major and step-minor."""
    k = int(sum(flags))
    raw = rng.normal((n, 1 + k, dim))
    noise = np.zeros((len(flags), n, dim))
    idx = np.flatnonzero(flags)
    noise[idx] = np.transpose(raw[:, 1:, :], (1, 0, 2))
    return NoisePlan(np.ascontiguousarray(raw[:, 0, :]), noise)


@dataclass
class SampleBatch:
    x: np.ndarray
    timesteps: list
    trajectory: list | None = None


def sample(net, cfg, n, sched, rng=None, record_trajectory=False, hooks=None,
           capture=None, plan=None, dim=None):
    """Generate ``n`` samples; pass ``plan`` to reuse noise across networks."""
    if n < 1:
        raise InputError("n must be >= 1")
    dim = dim or net.input_dim
    cfg.check()
    steps = cfg.transitions(sched.T)
    if plan is None:
        plan = draw_noise(rng, n, dim, cfg.stochastic_steps(sched))
    x = plan.x_T.copy()
    traj = [x.copy()] if record_trajectory else None
    for k, (t, t_prev) in enumerate(steps):
        if cfg.kind == "ddpm":
            z = plan.noise[k] if t >= 2 else None
            x = p_sample_ddpm(net, x, t, sched, noise=z, hooks=hooks,
                              variance=cfg.variance, clip=cfg.clip, capture=capture)
        else:
            x = ddim_step(net, x, t, t_prev, cfg.eta, sched, noise=plan.noise[k],
                          hooks=hooks, clip=cfg.clip, capture=capture)
        if record_trajectory:
            traj.append(x.copy())
    return SampleBatch(x, [t for t, _ in steps], traj)
