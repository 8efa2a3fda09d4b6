"""Toy 2-D datasets and the epsilon-prediction training loop."""
import math
from dataclasses import asdict, dataclass

import numpy as np

from dmquant.core import ConfigError, Rng
from dmquant.diffusion import q_sample

DATASET_KINDS = ("swiss_roll", "gaussian_mixture", "checkerboard")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(eq=False)
class ToyDataset:
    kind: str
    data: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    seed: int

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def bound(self):
        """Largest absolute coordinate in the training data."""
        return float(np.max(np.abs(self.data)))

    def standardize(self, raw):
        return (raw - self.mean) / self.std


def _raw_points(kind, n, rng):
    if kind == "swiss_roll":
        u = rng.uniform(n)
        t = 1.5 * math.pi * (1.0 + 2.0 * u)
        noise = rng.normal((n, 2))
        return np.stack([t * np.cos(t), t * np.sin(t)], axis=1) + 0.5 * noise
    if kind == "gaussian_mixture":
        k = rng.integers(8, n)
        ang = 2.0 * math.pi * k / 8.0
        centers = 4.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return centers + 0.25 * rng.normal((n, 2))
    if kind == "checkerboard":
        u = rng.uniform(3 * n).reshape(n, 3)
        col = np.floor(4.0 * u[:, 0])
        # rows of matching parity keep (col + row) even: 8 of the 16 cells
        row = 2.0 * np.floor(2.0 * u[:, 1]) + (col % 2)
        return np.stack([4.0 * u[:, 0] - 2.0, row + u[:, 2] - 2.0], axis=1)
    raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")


def make_dataset(kind, n, seed):
    """``n`` points of the named 2-D distribution, standardized per coordinate."""
    if n < 2:
        raise ConfigError("dataset needs n >= 2")
    raw = _raw_points(kind, n, Rng(seed, stream=11))
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    data = (raw - mean) / std
    # second pass removes the rounding residue of the first
    m2 = data.mean(axis=0)
    s2 = data.std(axis=0)
    data = (data - m2) / s2
    return ToyDataset(kind, data, mean + m2 * std, std * s2, seed)


def held_out(dataset, n, seed):
    """Fresh points from the same distribution, mapped with the dataset's own standardization."""
    return dataset.standardize(_raw_points(dataset.kind, n, Rng(seed, stream=12)))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 256
    iters: int = 20000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.batch < 1 or self.iters < 0:
            raise ConfigError("lr must be >= 0 and batch, iters positive")

    def to_json(self):
        return asdict(self)


class Adam:
    def __init__(self, shapes, cfg):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def update(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def train(net, sched, dataset, cfg, progress=None):
    """Train ``net`` in place on the epsilon-MSE objective; returns the per-iteration losses.

    Each iteration draws, in order: batch indices, timesteps in ``[1, T]``, then noise.
    """
    rng = Rng(cfg.seed, stream=21)
    params = [a for W, b in net.layers for a in (W, b)]
    opt = Adam([p.shape for p in params], cfg)
    losses = np.empty(cfg.iters)
    data = dataset.data
    for it in range(cfg.iters):
        idx = rng.integers(dataset.n, cfg.batch)
        t = 1 + rng.integers(sched.T, cfg.batch)
        eps = rng.normal((cfg.batch, net.input_dim))
        x0 = data[idx]
        xt = q_sample(x0, t, eps, sched)
        loss, grads = net.backward(xt, t, eps)
        if not math.isfinite(loss):
            raise TrainingDivergedError(it)
        losses[it] = loss
        opt.update(params, [a for dW, db in grads for a in (dW, db)])
        if progress is not None:
            progress(it, loss)
    return losses
