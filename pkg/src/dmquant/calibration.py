"""Calibration-set collectors and the layer-wise PTQ calibration pass.

Collectors draw all randomness for sample ``i`` (its timestep, its ``x_T`` and
the noise of each denoising step it needs) before sample ``i + 1``; the chains
themselves are then advanced together as one batch. A chain stopped at ``t_i``
holds ``x_{t_i}``: ``t_i = T`` is the initial noise, ``t_i = 0`` a finished sample.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from dmquant.core import ConfigError, InputError, Rng
from dmquant.diffusion import OutputHooks, SamplerConfig, StepCapture, p_sample_ddpm, q_sample, sample
from dmquant.quantizer import QuantMetric, SearchConfig, activation_params, weight_params
from dmquant.scorenet import QuantizedNetwork

COLLECTORS = ("ndtc", "fixed_t", "uniform_t", "diffusion_images")


@dataclass(eq=False)
class CalibrationSet:
    samples: np.ndarray
    timesteps: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.samples.shape[0] != self.timesteps.shape[0]:
            raise InputError("samples and timesteps differ in length")
        T = self.manifest.get("T")
        if T is not None and self.timesteps.size and (
            self.timesteps.min() < 0 or self.timesteps.max() > T
        ):
            raise InputError("calibration timestep outside [0, T]")

    @property
    def N(self):
        return self.samples.shape[0]


def _noisy_steps(T, t_target):
    """Number of noise draws for a chain from ``T`` down to ``t_target`` (step t=1 draws none)."""
    return max(0, T - max(t_target + 1, 2) + 1)


def _draw_chain(rng, T, t_target, dim, noise, i):
    x_T = rng.normal(dim)
    k = _noisy_steps(T, t_target)
    if k:
        noise[i, :k] = rng.normal((k, dim))
    return x_T


def run_chains(net, sched, x_T, targets, noise, variance="fixed_small"):
    """Advance chain ``i`` from ``T`` to ``targets[i]``; ``noise[i, T - t]`` feeds step ``t``."""
    x = np.array(x_T, dtype=np.float64)
    targets = np.asarray(targets)
    for t in range(sched.T, 0, -1):
        active = np.flatnonzero(targets < t)
        if active.size == 0:
            continue
        z = noise[active, sched.T - t] if t >= 2 else None
        x[active] = p_sample_ddpm(net, x[active], t, sched, noise=z, variance=variance)
    return x


def _manifest(kind, rng, N, sched, **extra):
    m = {"collector": kind, "N": int(N), "T": sched.T, "rng": rng.snapshot()}
    m.update(extra)
    return m


def _collect_chains(kind, fp_net, sched, N, rng, draw_t, **extra):
    if N < 1:
        raise InputError("calibration set needs N >= 1")
    manifest = _manifest(kind, rng, N, sched, **extra)
    dim = fp_net.input_dim
    T = sched.T
    targets = np.empty(N, dtype=np.int64)
    x_T = np.empty((N, dim))
    noise = np.zeros((N, T, dim))
    for i in range(N):
        targets[i] = draw_t()
        x_T[i] = _draw_chain(rng, T, targets[i], dim, noise, i)
    samples = run_chains(fp_net, sched, x_T, targets, noise)
    return CalibrationSet(samples, targets, manifest)


def ndtc_timestep(z, mu, T):
    """Map a standard normal draw to ``clamp(floor(mu + sqrt(T/2) z), 0, T)``."""
    return min(max(math.floor(mu + math.sqrt(T / 2.0) * z), 0), T)


def collect_ndtc(fp_net, sched, N, mu, rng, **extra):
    """Timesteps from a normal centred at ``mu`` (std ``sqrt(T/2)``), floored and clamped."""
    T = sched.T
    if mu > T / 2:
        raise ConfigError(f"NDTC mean must satisfy mu <= T/2 = {T / 2}, got {mu}")
    return _collect_chains(
        "ndtc", fp_net, sched, N, rng, lambda: ndtc_timestep(rng.standard_normal(), mu, T),
        mu=float(mu), **extra,
    )


def collect_fixed_t(fp_net, sched, N, t, rng, **extra):
    if not 0 <= t <= sched.T:
        raise InputError(f"t must lie in [0, {sched.T}], got {t}")
    return _collect_chains("fixed_t", fp_net, sched, N, rng, lambda: int(t), t=int(t), **extra)


def collect_uniform_t(fp_net, sched, N, rng, **extra):
    """Timesteps uniform on the integers ``0..T``."""
    T = sched.T
    return _collect_chains(
        "uniform_t", fp_net, sched, N, rng, lambda: int(rng.integers(T + 1, 1)[0]), **extra
    )


def collect_diffusion_images(dataset, sched, N, rng, **extra):
    """Forward-noised data points ``q_sample(x0, t_i, eps)`` with ``t_i`` uniform on ``0..T``."""
    data = dataset.data if hasattr(dataset, "data") else np.asarray(dataset)
    if data.shape[0] == 0:
        raise InputError("dataset is empty")
    if N < 1:
        raise InputError("calibration set needs N >= 1")
    manifest = _manifest("diffusion_images", rng, N, sched, **extra)
    dim = data.shape[1]
    samples = np.empty((N, dim))
    targets = np.empty(N, dtype=np.int64)
    for i in range(N):
        x0 = data[rng.integers(data.shape[0], 1)[0]]
        targets[i] = rng.integers(sched.T + 1, 1)[0]
        eps = rng.normal(dim)
        samples[i] = q_sample(x0, int(targets[i]), eps, sched)
    return CalibrationSet(samples, targets, manifest)


def collect(kind, fp_net, sched, N, rng, mu=None, t=None, dataset=None, **extra):
    """Dispatch by collector name."""
    if kind == "ndtc":
        return collect_ndtc(fp_net, sched, N, 0.4 * sched.T if mu is None else mu, rng, **extra)
    if kind == "fixed_t":
        return collect_fixed_t(fp_net, sched, N, sched.T // 2 if t is None else t, rng, **extra)
    if kind == "uniform_t":
        return collect_uniform_t(fp_net, sched, N, rng, **extra)
    if kind == "diffusion_images":
        if dataset is None:
            raise ConfigError("diffusion_images collector needs a dataset")
        return collect_diffusion_images(dataset, sched, N, rng, **extra)
    raise ConfigError(f"unknown collector {kind!r}; expected one of {COLLECTORS}")


def regenerate(manifest, fp_net, sched, dataset=None):
    """Rebuild a calibration set from its manifest."""
    snap = manifest["rng"]
    rng = Rng.from_snapshot(snap)
    extra = {k: v for k, v in manifest.items() if k not in ("collector", "N", "T", "rng", "mu", "t")}
    return collect(manifest["collector"], fp_net, sched, manifest["N"], rng,
                   mu=manifest.get("mu"), t=manifest.get("t"), dataset=dataset, **extra)


def pooled_activations(net, calib):
    """Inputs of every affine layer over the whole calibration set, all timesteps together."""
    taps = []
    net.forward(calib.samples, calib.timesteps, taps=taps)
    return taps


HOOK_NAMES = ("mu", "sigma", "x")


def fit_output_hooks(fp_net, sched, names, metric, bits, search_cfg, sampler_cfg=None,
                     n=256, seed=0):
    """Params for the sampler's mean/variance/state, fitted on pooled full-precision runs."""
    names = tuple(names)
    unknown = set(names) - set(HOOK_NAMES)
    if unknown:
        raise ConfigError(f"unknown output hooks {sorted(unknown)}")
    if not names:
        return OutputHooks()
    cap = StepCapture()
    sample(fp_net, sampler_cfg or SamplerConfig(), n, sched, Rng(seed, stream=61), capture=cap)
    fitted = {name: activation_params(cap.pooled(name), metric, search_cfg, bits) for name in names}
    return OutputHooks(**fitted)


def calibrate_network(fp_net, calib, metric=None, bits=8, search_cfg=None, output_hooks=(),
                      sched=None, sampler_cfg=None, hook_samples=256, hook_seed=None):
    """Fit weight, activation and (optionally) output-hook params; return the quantized network.

    Weights get per-output-channel symmetric params; each affine input gets one
    asymmetric per-tensor param set fitted on activations pooled across the
    whole calibration set. ``fp_net`` is not modified.
    """
    if calib.N == 0:
        raise InputError("calibration set is empty")
    if calib.samples.shape[1] != fp_net.input_dim:
        raise InputError("calibration samples do not match the network input")
    metric = metric or QuantMetric("lp", 2.4)
    search_cfg = search_cfg or SearchConfig()
    wparams = [weight_params(W, metric, search_cfg, bits) for W, _ in fp_net.layers]
    aparams = [activation_params(a, metric, search_cfg, bits)
               for a in pooled_activations(fp_net, calib)]
    hooks = OutputHooks()
    if output_hooks:
        if sched is None:
            raise ConfigError("output hooks need the noise schedule")
        seed = calib.manifest.get("rng", {}).get("seed", 0) if hook_seed is None else hook_seed
        hooks = fit_output_hooks(fp_net, sched, output_hooks, metric, bits, search_cfg,
                                 sampler_cfg, hook_samples, seed)
    return QuantizedNetwork(fp_net, wparams, aparams, hooks)
