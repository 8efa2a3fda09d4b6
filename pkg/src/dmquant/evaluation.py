"""Sample-quality surrogates, quantization diagnostics and the ablation harnesses.

Generated sets are scored with the sliced 2-Wasserstein distance against
held-out data. Every experiment row for a given seed shares the same sampler
noise, the same held-out set and the same projection directions, so rows differ
only by the quantization being compared.
"""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from dmquant.calibration import calibrate_network, collect, fit_output_hooks, run_chains
from dmquant.core import DimensionError, InputError, Rng, matmul
from dmquant.diffusion import OutputHooks, SamplerConfig, draw_noise, sample
from dmquant.quantizer import QuantMetric, SearchConfig
from dmquant.training import held_out

HIST_BINS = 64


def _quantiles(sorted_cols, levels):
    n = sorted_cols.shape[0]
    pos = levels * n - 0.5
    grid = np.arange(n, dtype=np.float64)
    return np.stack([np.interp(pos, grid, sorted_cols[:, j]) for j in range(sorted_cols.shape[1])], axis=1)


def sliced_wasserstein(a, b, n_proj=128, rng=None):
    """Root-mean-square over random directions of the 1-D 2-Wasserstein distance.

    Projected samples are compared through their quantile functions, evaluated
    at the midpoints of the smaller set's grid.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"point sets must share dimension, got {a.shape} and {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2 or n_proj < 1:
        raise InputError("need at least two points per set and one projection")
    rng = rng or Rng(0, stream=81)
    dirs = rng.normal((n_proj, a.shape[1]))
    dirs /= np.sqrt(np.sum(dirs * dirs, axis=1, keepdims=True))
    dirs_t = np.ascontiguousarray(dirs.T)
    pa = np.sort(matmul(a, dirs_t), axis=0)
    pb = np.sort(matmul(b, dirs_t), axis=0)
    if pa.shape[0] != pb.shape[0]:
        c = min(pa.shape[0], pb.shape[0])
        levels = (np.arange(c) + 0.5) / c
        pa = _quantiles(pa, levels) if pa.shape[0] != c else pa
        pb = _quantiles(pb, levels) if pb.shape[0] != c else pb
    w2sq = np.mean((pa - pb) ** 2, axis=0)
    return float(math.sqrt(float(np.mean(w2sq))))


def trajectory_divergence(fp_net, q_net, sched, cfg, n, seed):
    """RMS per-element gap between the two samplers after each step, noise shared."""
    plan = draw_noise(Rng(seed, stream=71), n, fp_net.input_dim, cfg.stochastic_steps(sched))
    fp = sample(fp_net, cfg, n, sched, record_trajectory=True, plan=plan)
    q = sample(q_net, cfg, n, sched, record_trajectory=True, plan=plan,
               hooks=getattr(q_net, "output_hooks", None))
    return np.array([math.sqrt(float(np.mean((a - b) ** 2)))
                     for a, b in zip(fp.trajectory, q.trajectory)])


@dataclass
class ActivationStats:
    layer: int
    t: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    hist: list
    hist_range: tuple
    count: int


def drift_score(iqrs):
    """Largest over smallest interquartile range; an all-degenerate layer scores 1."""
    lo, hi = min(iqrs), max(iqrs)
    if lo == 0.0:
        return 1.0 if hi == 0.0 else math.inf
    return hi / lo


def activation_drift_report(fp_net, sched, timesteps, n_per_t, rng):
    """Per-layer activation statistics at each requested timestep, plus drift scores."""
    timesteps = [int(t) for t in timesteps]
    if any(not 1 <= t <= sched.T for t in timesteps):
        raise InputError("timesteps must lie in [1, T]")
    dim = fp_net.input_dim
    captured = {}
    for t in timesteps:
        targets = np.full(n_per_t, t)
        x_T = np.empty((n_per_t, dim))
        noise = np.zeros((n_per_t, sched.T, dim))
        steps = max(0, sched.T - max(t + 1, 2) + 1)
        for i in range(n_per_t):
            x_T[i] = rng.normal(dim)
            if steps:
                noise[i, :steps] = rng.normal((steps, dim))
        xt = run_chains(fp_net, sched, x_T, targets, noise)
        taps = []
        fp_net.forward(xt, targets, taps=taps)
        captured[t] = [tap.reshape(-1) for tap in taps]
    n_layers = len(fp_net.layers)
    stats, scores = [], []
    for layer in range(n_layers):
        vals = [captured[t][layer] for t in timesteps]
        lo = min(float(v.min()) for v in vals)
        hi = max(float(v.max()) for v in vals)
        iqrs = []
        for t, v in zip(timesteps, vals):
            q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
            hist, _ = np.histogram(v, bins=HIST_BINS, range=(lo, hi) if hi > lo else (lo - 0.5, hi + 0.5))
            stats.append(ActivationStats(layer, t, float(v.min()), float(q1), float(med), float(q3),
                                         float(v.max()), hist.tolist(), (lo, hi), int(v.size)))
            iqrs.append(float(q3 - q1))
        scores.append(drift_score(iqrs))
    return DriftReport(timesteps, stats, scores)


@dataclass
class DriftReport:
    timesteps: list
    stats: list
    drift_scores: list

    def validate(self):
        """Check the schema and ordering invariants; raises ``ValueError`` on violation."""
        n_layers = len(self.drift_scores)
        seen = {(s.layer, s.t) for s in self.stats}
        for layer in range(n_layers):
            for t in self.timesteps:
                if (layer, t) not in seen:
                    raise ValueError(f"missing stats for layer {layer}, t={t}")
        for s in self.stats:
            if not s.min <= s.q1 <= s.median <= s.q3 <= s.max:
                raise ValueError(f"quartiles out of order at layer {s.layer}, t={s.t}")
            if len(s.hist) != HIST_BINS or sum(s.hist) != s.count:
                raise ValueError(f"histogram mass mismatch at layer {s.layer}, t={s.t}")
        return True

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "t", "min", "q1", "median", "q3", "max", "count", "drift_score"])
        for s in self.stats:
            w.writerow([s.layer, s.t, repr(s.min), repr(s.q1), repr(s.median), repr(s.q3),
                        repr(s.max), s.count, repr(self.drift_scores[s.layer])])
        return buf.getvalue()

    def to_json(self):
        return {
            "timesteps": self.timesteps,
            "drift_scores": self.drift_scores,
            "stats": [asdict(s) for s in self.stats],
        }

    def to_svg(self, width=220, height=160):
        """Boxplot panel per layer: one box per timestep (whiskers at min/max)."""
        n_layers = len(self.drift_scores)
        W = width * n_layers
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height + 30}">']
        for layer in range(n_layers):
            rows = [s for s in self.stats if s.layer == layer]
            lo = min(s.min for s in rows)
            hi = max(s.max for s in rows)
            span = (hi - lo) or 1.0

            def y(v):
                return 10 + (hi - v) / span * (height - 20)

            x0 = layer * width
            parts.append(f'<text x="{x0 + 8}" y="{height + 22}" font-size="11">'
                         f'layer {layer} drift {self.drift_scores[layer]:.2f}</text>')
            step = width / (len(rows) + 1)
            for k, s in enumerate(rows):
                cx = x0 + step * (k + 1)
                parts.append(f'<line x1="{cx:.1f}" x2="{cx:.1f}" y1="{y(s.max):.1f}" '
                             f'y2="{y(s.min):.1f}" stroke="black"/>')
                parts.append(f'<rect x="{cx - 8:.1f}" y="{y(s.q3):.1f}" width="16" '
                             f'height="{max(y(s.q1) - y(s.q3), 0.5):.1f}" fill="#9cc" stroke="black"/>')
                parts.append(f'<line x1="{cx - 8:.1f}" x2="{cx + 8:.1f}" y1="{y(s.median):.1f}" '
                             f'y2="{y(s.median):.1f}" stroke="red"/>')
                parts.append(f'<text x="{cx - 8:.1f}" y="{height + 8}" font-size="9">t={s.t}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


@dataclass
class EvalReport:
    """One table row: the median over seeds of a per-seed score."""

    name: str
    metric: str
    value: float
    seeds: list
    per_seed: list
    config: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, name, seeds, values, config, metric="swd"):
        return cls(name, metric, float(np.median(values)), list(seeds), [float(v) for v in values], config)


def table_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "metric", "seed", "value"])
    for r in rows:
        for s, v in zip(r.seeds, r.per_seed):
            w.writerow([r.name, r.metric, s, repr(v)])
        w.writerow([r.name, r.metric, "median", repr(r.value)])
    return buf.getvalue()


def table_to_json(rows):
    return [asdict(r) for r in rows]


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    n_eval: int = 2048
    n_proj: int = 128
    bits: int = 8
    calib_n: int = 1024
    mu_fraction: float = 0.4
    metric: QuantMetric = QuantMetric("lp", 2.4)
    search: SearchConfig = SearchConfig()
    sampler: SamplerConfig = SamplerConfig(clip="data")
    hook_samples: int = 256

    def to_json(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


class _SeedContext:
    """Everything shared by the rows of one seed."""

    def __init__(self, fp_net, sched, dataset, cfg, seed):
        self.seed = seed
        self.ref = held_out(dataset, cfg.n_eval, 10_000 + seed)
        self.plan = draw_noise(Rng(seed, stream=71), cfg.n_eval, fp_net.input_dim,
                               cfg.sampler.stochastic_steps(sched))
        self.fp_net, self.sched, self.dataset, self.cfg = fp_net, sched, dataset, cfg

    def score(self, net, hooks=None):
        cfg = self.cfg
        gen = sample(net, cfg.sampler, cfg.n_eval, self.sched, plan=self.plan, hooks=hooks).x
        return sliced_wasserstein(gen, self.ref, cfg.n_proj, Rng(self.seed, stream=81))

    def calib_rng(self):
        return Rng(self.seed, stream=91)

    def collect(self, kind, **kw):
        return collect(kind, self.fp_net, self.sched, self.cfg.calib_n, self.calib_rng(),
                       dataset=self.dataset, seed=self.seed, **kw)


def _run(rows_fn, fp_net, sched, dataset, cfg, seeds):
    seeds = list(seeds if seeds is not None else cfg.seeds)
    cfg = replace(cfg, sampler=cfg.sampler.resolve(dataset.bound))
    per_row = {}
    for seed in seeds:
        ctx = _SeedContext(fp_net, sched, dataset, cfg, seed)
        for name, value in rows_fn(ctx):
            per_row.setdefault(name, []).append(value)
    snap = cfg.to_json()
    return [EvalReport.from_values(name, seeds, vals, snap) for name, vals in per_row.items()]


def fp_quality(fp_net, sched, dataset, cfg=ExperimentConfig(), seeds=None):
    """FP model SWD to held-out data next to the held-out/held-out noise floor."""

    def rows(ctx):
        other = held_out(ctx.dataset, ctx.cfg.n_eval, 20_000 + ctx.seed)
        yield "fp", ctx.score(ctx.fp_net)
        yield "heldout_floor", sliced_wasserstein(other, ctx.ref, ctx.cfg.n_proj,
                                                  Rng(ctx.seed, stream=81))

    return _run(rows, fp_net, sched, dataset, cfg, seeds)


OPSEL_ROWS = (("fp", ()), ("mu", ("mu",)), ("sigma", ("sigma",)), ("x", ("x",)),
              ("mu+sigma+x", ("mu", "sigma", "x")))


def experiment_operation_selection(fp_net, sched, dataset, cfg=ExperimentConfig(), seeds=None):
    """Quantize only the sampler outputs named by each row; the network stays full precision."""

    def rows(ctx):
        c = ctx.cfg
        full = fit_output_hooks(ctx.fp_net, ctx.sched, ("mu", "sigma", "x"), c.metric, c.bits,
                                c.search, c.sampler, c.hook_samples, ctx.seed)
        for name, hooks in OPSEL_ROWS:
            chosen = OutputHooks(**{h: getattr(full, h) for h in hooks})
            yield name, ctx.score(ctx.fp_net, chosen if hooks else None)

    return _run(rows, fp_net, sched, dataset, cfg, seeds)


METRIC_ROWS = (("l1", QuantMetric("l1")), ("cosine", QuantMetric("cosine")),
               ("kl", QuantMetric("kl")), ("lp2.4", QuantMetric("lp", 2.4)))


def experiment_metric_comparison(fp_net, sched, dataset, cfg=ExperimentConfig(), seeds=None):
    """Full calibration on one NDTC set per seed, once per calibration metric."""

    def rows(ctx):
        calib = ctx.collect("ndtc", mu=ctx.cfg.mu_fraction * ctx.sched.T)
        for name, metric in METRIC_ROWS:
            q = calibrate_network(ctx.fp_net, calib, metric, ctx.cfg.bits, ctx.cfg.search)
            yield name, ctx.score(q)

    return _run(rows, fp_net, sched, dataset, cfg, seeds)


def experiment_collector_comparison(fp_net, sched, dataset, cfg=ExperimentConfig(), seeds=None):
    """FP against networks calibrated on each collector's set."""

    def rows(ctx):
        T = ctx.sched.T
        yield "fp", ctx.score(ctx.fp_net)
        sets = (
            ("fixed_t", ctx.collect("fixed_t", t=T // 2)),
            ("uniform_t", ctx.collect("uniform_t")),
            ("diffusion_images", ctx.collect("diffusion_images")),
            ("ndtc", ctx.collect("ndtc", mu=ctx.cfg.mu_fraction * T)),
        )
        for name, calib in sets:
            q = calibrate_network(ctx.fp_net, calib, ctx.cfg.metric, ctx.cfg.bits, ctx.cfg.search)
            yield name, ctx.score(q)

    return _run(rows, fp_net, sched, dataset, cfg, seeds)
