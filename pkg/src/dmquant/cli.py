"""``dmquant`` command line: train, collect, calibrate, sample, eval, analyze, experiment.

Exit codes: 0 ok, 2 bad configuration, 3 missing input, 4 incompatible
artifact, 5 runtime or numeric failure.
"""
import argparse
import copy
import json
import os
import sys

from dmquant import _backend
from dmquant.calibration import calibrate_network, collect
from dmquant.core import ConfigError, Rng
from dmquant.diffusion import SamplerConfig, make_schedule, sample
from dmquant.evaluation import (
    EvalReport,
    ExperimentConfig,
    activation_drift_report,
    experiment_collector_comparison,
    experiment_metric_comparison,
    experiment_operation_selection,
    fp_quality,
    sliced_wasserstein,
    table_to_csv,
    table_to_json,
)
from dmquant.formats import (
    IncompatibleArtifactError,
    dumps,
    load_calibration,
    load_checkpoint,
    load_model,
    load_samples,
    save_calibration,
    save_checkpoint,
    save_qmodel,
    save_samples,
    write_text,
)
from dmquant.quantizer import QuantMetric, SearchConfig
from dmquant.scorenet import ScoreNetwork
from dmquant.training import TrainConfig, TrainingDivergedError, held_out, make_dataset

EXIT_CONFIG, EXIT_MISSING, EXIT_INCOMPATIBLE, EXIT_RUNTIME = 2, 3, 4, 5

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {"kind": "swiss_roll", "n": 10000, "seed": 0},
    "schedule": {"kind": "cosine", "T": 100},
    "model": {"time_embed_dim": 32, "hidden_dims": [128, 128, 128]},
    "train": {"lr": 1e-3, "batch": 256, "iters": 20000},
    "sampler": {"kind": "ddpm", "steps": None, "eta": 0.0, "variance": "fixed_small", "clip": "data"},
    "quant": {
        "bits": 8,
        "metric": "lp2.4",
        "search": {"num_candidates": 100, "min_scale_fraction": 0.2},
        "granularity": {"weights": "per-channel", "activations": "per-tensor"},
        "output_hooks": [],
        "hook_samples": 256,
    },
    "calibration": {"collector": "ndtc", "N": 1024, "mu": None, "t": None},
    "eval": {"n_eval": 2048, "n_proj": 128, "seeds": [0, 1, 2, 3, 4]},
    "analyze": {"timesteps": None, "n_per_t": 512},
    "io": {"out_dir": "."},
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(EXIT_CONFIG, f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(EXIT_CONFIG, f"config key '{where}' must be an object")
            _merge(base[key], value, where)
        else:
            base[key] = value


def load_config(path):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        if not os.path.exists(path):
            raise CliError(EXIT_MISSING, f"config file not found: {path}")
        try:
            with open(path) as fh:
                user = json.load(fh)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise CliError(EXIT_CONFIG, "config must be a JSON object")
        _merge(cfg, user)
    return cfg


def _override(cfg, section, key, value):
    if value is not None:
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value


def _out(cfg, path, default):
    return path or os.path.join(cfg["io"]["out_dir"], default)


def _schedule(cfg):
    s = cfg["schedule"]
    return make_schedule(s["kind"], int(s["T"]))


def _sampler(cfg, header=None):
    """Sampler settings; ``clip: "data"`` needs the checkpoint header to resolve."""
    s = cfg["sampler"]
    clip = s["clip"]
    if clip is not None and clip != "data":
        clip = float(clip)
    sc = SamplerConfig(s["kind"], s["steps"], float(s["eta"]), s["variance"], clip)
    if clip == "data" and header is not None:
        bound = header.get("data_bound")
        sc = sc.resolve(bound if bound is not None else _dataset(header).bound)
    return sc


def _search(cfg):
    s = cfg["quant"]["search"]
    return SearchConfig(int(s["num_candidates"]), float(s["min_scale_fraction"]))


def _check_granularity(cfg):
    g = cfg["quant"]["granularity"]
    if g != {"weights": "per-channel", "activations": "per-tensor"}:
        raise CliError(EXIT_CONFIG, "quant.granularity supports only per-channel weights "
                                    "and per-tensor activations")


def _dataset(header_or_cfg):
    d = header_or_cfg["dataset"]
    return make_dataset(d["kind"], int(d["n"]), int(d["seed"]))


def _experiment_config(cfg):
    e, q = cfg["eval"], cfg["quant"]
    return ExperimentConfig(
        seeds=tuple(int(s) for s in e["seeds"]),
        n_eval=int(e["n_eval"]),
        n_proj=int(e["n_proj"]),
        bits=int(q["bits"]),
        calib_n=int(cfg["calibration"]["N"]),
        mu_fraction=(0.4 if cfg["calibration"]["mu"] is None
                     else float(cfg["calibration"]["mu"]) / int(cfg["schedule"]["T"])),
        metric=QuantMetric.parse(q["metric"]),
        search=_search(cfg),
        sampler=_sampler(cfg),
        hook_samples=int(q["hook_samples"]),
    )


def _echo(cfg):
    print(json.dumps({"effective_config": cfg}, sort_keys=True))


def _load_ckpt(path):
    if not path:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    return load_checkpoint(path)


def cmd_train(args, cfg):
    _override(cfg, None, "seed", args.seed)
    _override(cfg, "train", "iters", args.iters)
    _override(cfg, "dataset", "kind", args.dataset)
    _echo(cfg)
    sched = _schedule(cfg)
    ds = _dataset(cfg)
    m = cfg["model"]
    net = ScoreNetwork.init(2, Rng(cfg["seed"], stream=31), tuple(m["hidden_dims"]),
                            int(m["time_embed_dim"]), sched.T)
    tc = cfg["train"]
    tcfg = TrainConfig(float(tc["lr"]), int(tc["batch"]), int(tc["iters"]), int(cfg["seed"]))
    losses = _train(net, sched, ds, tcfg)
    meta = {"seed": cfg["seed"], "train": tcfg.to_json(), "dataset": cfg["dataset"],
            "data_bound": ds.bound}
    ckpt = _out(cfg, args.out, "model.ckpt")
    save_checkpoint(ckpt, net, sched, meta)
    loss_csv = args.loss_csv or os.path.splitext(ckpt)[0] + "_loss.csv"
    write_text(loss_csv, "iter,loss\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(losses)))
    print(f"wrote {ckpt} and {loss_csv}")


def _train(net, sched, ds, tcfg):
    from dmquant.training import train

    try:
        return train(net, sched, ds, tcfg)
    except TrainingDivergedError as exc:
        raise CliError(EXIT_RUNTIME, str(exc)) from exc


def cmd_collect(args, cfg):
    _override(cfg, None, "seed", args.seed)
    c = cfg["calibration"]
    _override(cfg, "calibration", "collector", args.collector.replace("-", "_") if args.collector else None)
    _override(cfg, "calibration", "N", args.n)
    _override(cfg, "calibration", "mu", args.mu)
    _override(cfg, "calibration", "t", args.t)
    _echo(cfg)
    net, sched, header = _load_ckpt(args.checkpoint)
    kind = c["collector"]
    ds = _dataset(header) if kind == "diffusion_images" else None
    calib = collect(kind, net, sched, int(c["N"]), Rng(cfg["seed"], stream=91), mu=c["mu"], t=c["t"],
                    dataset=ds, checkpoint=os.path.basename(args.checkpoint))
    out = _out(cfg, args.out, "calib.calib")
    save_calibration(out, calib)
    print(f"wrote {out} ({calib.N} samples)")


def cmd_calibrate(args, cfg):
    _override(cfg, "quant", "bits", args.bits)
    _override(cfg, "quant", "metric", args.metric)
    if args.hooks is not None:
        cfg["quant"]["output_hooks"] = [h for h in args.hooks.split(",") if h]
    _check_granularity(cfg)
    _echo(cfg)
    net, sched, header = _load_ckpt(args.checkpoint)
    if not args.calib:
        raise CliError(EXIT_CONFIG, "--calib is required")
    calib = load_calibration(args.calib)
    if calib.samples.shape[1] != net.input_dim or calib.manifest.get("T") != sched.T:
        raise CliError(EXIT_INCOMPATIBLE, "calibration set does not match the checkpoint")
    q = cfg["quant"]
    qnet = calibrate_network(net, calib, QuantMetric.parse(q["metric"]), int(q["bits"]), _search(cfg),
                             tuple(q["output_hooks"]), sched, _sampler(cfg, header), int(q["hook_samples"]))
    out = _out(cfg, args.out, "model.qmodel")
    save_qmodel(out, qnet, sched, header)
    print(f"wrote {out}")


def cmd_sample(args, cfg):
    _override(cfg, None, "seed", args.seed)
    _override(cfg, "sampler", "kind", args.sampler)
    _override(cfg, "sampler", "steps", args.steps)
    _override(cfg, "sampler", "eta", args.eta)
    _echo(cfg)
    if not args.model:
        raise CliError(EXIT_CONFIG, "--model is required")
    net, sched, header = load_model(args.model)
    n = args.n or int(cfg["eval"]["n_eval"])
    batch = sample(net, _sampler(cfg, header), n, sched, Rng(cfg["seed"], stream=71),
                   hooks=getattr(net, "output_hooks", None))
    out = _out(cfg, args.out, "samples.bin")
    save_samples(out, batch.x, {"model": os.path.basename(args.model), "seed": cfg["seed"],
                                "sampler": cfg["sampler"], "n": n})
    print(f"wrote {out}")


def cmd_eval(args, cfg):
    _override(cfg, None, "seed", args.seed)
    _echo(cfg)
    if not args.samples:
        raise CliError(EXIT_CONFIG, "--samples is required")
    x, _ = load_samples(args.samples)
    if args.reference:
        ref, _ = load_samples(args.reference)
        ref_name = os.path.basename(args.reference)
    elif args.checkpoint:
        _, _, header = _load_ckpt(args.checkpoint)
        ref = held_out(_dataset(header), int(cfg["eval"]["n_eval"]), 10_000 + int(cfg["seed"]))
        ref_name = "held_out"
    else:
        raise CliError(EXIT_CONFIG, "eval needs --reference or --checkpoint")
    if ref.shape[1] != x.shape[1]:
        raise CliError(EXIT_INCOMPATIBLE, "sample files differ in dimension")
    value = sliced_wasserstein(x, ref, int(cfg["eval"]["n_proj"]), Rng(cfg["seed"], stream=81))
    report = EvalReport.from_values(f"{os.path.basename(args.samples)} vs {ref_name}",
                                    [cfg["seed"]], [value], {"n_proj": cfg["eval"]["n_proj"]})
    _write_table(cfg, args.out, "eval", [report])


def _write_table(cfg, out, default, rows):
    prefix = _out(cfg, out, default)
    write_text(prefix + ".csv", table_to_csv(rows))
    write_text(prefix + ".json", dumps(table_to_json(rows)) + "\n")
    for r in rows:
        print(f"{r.name:24s} {r.metric} median={r.value:.6g}")
    print(f"wrote {prefix}.csv and {prefix}.json")


def cmd_analyze(args, cfg):
    _override(cfg, None, "seed", args.seed)
    _echo(cfg)
    net, sched, _ = _load_ckpt(args.checkpoint)
    ts = cfg["analyze"]["timesteps"] or [max(1, round(f * sched.T)) for f in (0.1, 0.5, 0.9)]
    report = activation_drift_report(net, sched, ts, int(cfg["analyze"]["n_per_t"]),
                                     Rng(cfg["seed"], stream=101))
    report.validate()
    prefix = _out(cfg, args.out, "activations")
    write_text(prefix + ".csv", report.to_csv())
    write_text(prefix + ".json", dumps(report.to_json()) + "\n")
    if args.svg:
        write_text(prefix + ".svg", report.to_svg())
    for layer, score in enumerate(report.drift_scores):
        print(f"layer {layer}: drift score {score:.3f}")
    print(f"wrote {prefix}.csv")


EXPERIMENTS = {
    "opsel": experiment_operation_selection,
    "metric": experiment_metric_comparison,
    "collector": experiment_collector_comparison,
    "fp-quality": fp_quality,
}


def cmd_experiment(args, cfg):
    if args.seeds:
        cfg["eval"]["seeds"] = [int(s) for s in args.seeds.split(",")]
    _echo(cfg)
    net, sched, header = _load_ckpt(args.checkpoint)
    rows = EXPERIMENTS[args.kind](net, sched, _dataset(header), _experiment_config(cfg))
    _write_table(cfg, args.out, f"experiment_{args.kind}", rows)


def build_parser():
    p = argparse.ArgumentParser(prog="dmquant", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, help="kernel thread count (default: $DMQUANT_NUM_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output path (or prefix for reports)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train the full-precision model")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--dataset", choices=["swiss_roll", "gaussian_mixture", "checkerboard"])
    sp.add_argument("--loss-csv")

    sp = add("collect", cmd_collect, "collect a calibration set")
    sp.add_argument("--checkpoint")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--collector", choices=["ndtc", "fixed-t", "uniform-t", "diffusion-images"])
    sp.add_argument("--n", type=int, help="calibration set size")
    sp.add_argument("--mu", type=float, help="NDTC mean timestep (<= T/2)")
    sp.add_argument("--t", type=int, help="timestep for the fixed-t collector")

    sp = add("calibrate", cmd_calibrate, "fit quantization params")
    sp.add_argument("--checkpoint")
    sp.add_argument("--calib")
    sp.add_argument("--bits", type=int)
    sp.add_argument("--metric", help="lp2.4 (default), l1, cosine, kl")
    sp.add_argument("--hooks", help="comma list of output hooks: mu,sigma,x")

    sp = add("sample", cmd_sample, "draw samples from a checkpoint or quantized model")
    sp.add_argument("--model")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--sampler", choices=["ddpm", "ddim"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eta", type=float)

    sp = add("eval", cmd_eval, "sliced-Wasserstein distance between sample sets")
    sp.add_argument("--samples")
    sp.add_argument("--reference")
    sp.add_argument("--checkpoint", help="compare against held-out data of this checkpoint")
    sp.add_argument("--seed", type=int)

    sp = add("analyze", cmd_analyze, "activation statistics across timesteps")
    sp.add_argument("--checkpoint")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--svg", action="store_true", help="also write an SVG boxplot")

    sp = add("experiment", cmd_experiment, "run an ablation table")
    sp.add_argument("kind", choices=sorted(EXPERIMENTS))
    sp.add_argument("--checkpoint")
    sp.add_argument("--seeds", help="comma-separated seed list")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        _backend.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config)
        args.fn(args, cfg)
    except CliError as exc:
        print(f"dmquant: error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"dmquant: error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except IncompatibleArtifactError as exc:
        print(f"dmquant: error: incompatible artifact: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"dmquant: error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"dmquant: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
