"""Command-line entry point.

Subcommands: generate-data, train, evaluate, sample, forecast, compare,
kalman-check.  Configuration is a flat key=value text file plus per-field
command-line overrides; every run writes the resolved config next to its
outputs.  Exit codes: 0 success, 2 I/O error, 3 numerical divergence,
4 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .baseline import (
    ConventionalPosterior,
    baseline_training_step,
    elbo_path,
    grad_norm_vs_horizon,
    train_baseline,
)
from .datasets import gen_linear, gen_lorenz, gen_lotka_volterra, load_dataset, save_dataset
from .kalman import LinearSystemSpec, kalman_loglik
from .losses import nelbo_estimate, objective_gradients, train
from .model import LatentSDEModel, PosteriorReparam, load_checkpoint, save_checkpoint
from .optim import Adam
from .simulate import dump_trajectories, euler_maruyama, forecast, sample_prior

EXIT_OK = 0
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_CONFIG = 4

SYSTEMS = ("linear", "lorenz", "lotka-volterra")
METHODS = ("matching", "baseline")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """All knobs a run can depend on; every field has a CLI flag."""

    system: str = "linear"
    method: str = "matching"
    d_latent: int = 1
    hidden: int = 64
    context: int = 32
    iterations: int = 1000
    lr: float = 2e-4
    lr_decay: str = "cosine"
    seed: int = 0
    n_mc: int = 4
    L: int = 100
    paths: int = 64
    n_obs: int = 20
    horizon: float = 1.0
    n_series: int = 1
    state_dependent_g: bool = True
    g_min: float = 1e-4
    eval_samples: int = 256

    def validate(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; choose from {SYSTEMS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}; choose 'cosine' or 'none'")
        positive = ["d_latent", "hidden", "context", "lr", "n_mc", "L", "paths",
                    "n_obs", "horizon", "n_series", "g_min", "eval_samples"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(name, text, target_type):
    if target_type is bool:
        low = text.strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"cannot parse boolean {name}={text!r}")
    try:
        return target_type(text)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={text!r} as {target_type.__name__}")


def load_config_file(path):
    """Flat key=value lines; blank lines and '#' comments allowed."""
    types = {f.name: f.type for f in fields(RunConfig)}
    type_map = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in type_map:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _parse_value(key, value, type_map[key])
    del types
    return out


def resolve_config(args):
    """defaults < config file < explicit command-line flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            setattr(cfg, f.name, override)
    cfg.validate()
    return cfg


def write_resolved_config(out_dir, cfg):
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key}={value}\n")


def _ensure_out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# model construction helpers
# ---------------------------------------------------------------------------

def _generate(cfg):
    common = dict(n_obs=cfg.n_obs, horizon=cfg.horizon, n_series=cfg.n_series,
                  seed=cfg.seed)
    if cfg.system == "linear":
        return gen_linear(**common)
    if cfg.system == "lorenz":
        return gen_lorenz(**common)
    return gen_lotka_volterra(**common)


def _build_model(cfg, d_obs):
    return LatentSDEModel(cfg.d_latent, d_obs, hidden=cfg.hidden, g_min=cfg.g_min,
                          state_dependent_g=cfg.state_dependent_g, seed=cfg.seed)


def _build_posterior(cfg, d_obs, t_max):
    if cfg.method == "matching":
        return PosteriorReparam(d_obs, cfg.d_latent, context=cfg.context,
                                hidden=cfg.hidden, t_max=t_max, seed=cfg.seed + 1)
    return ConventionalPosterior(d_obs, cfg.d_latent, context=cfg.context,
                                 hidden=cfg.hidden, seed=cfg.seed + 1)


def _dataset_t_max(ds):
    return float(max(s.ts[-1] for s in ds.series))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    ds = _generate(cfg)
    path = os.path.join(out_dir, "dataset.csv")
    save_dataset(path, ds)
    write_resolved_config(out_dir, cfg)
    n_rows = sum(len(s) for s in ds.series)
    print(f"wrote {path}: system={cfg.system} series={len(ds.series)} "
          f"rows={n_rows} d_obs={ds.meta['d_obs']}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    ds = load_dataset(args.data)
    t_max = _dataset_t_max(ds)
    model = _build_model(cfg, ds.meta["d_obs"])
    post = _build_posterior(cfg, ds.meta["d_obs"], t_max)
    write_resolved_config(out_dir, cfg)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    extra = {"method": cfg.method, "data": os.path.abspath(args.data),
             "iterations": cfg.iterations}
    diverged = False
    try:
        if cfg.method == "matching":
            history = train(model, post, ds, cfg.iterations, lr=cfg.lr,
                            seed=cfg.seed, n_mc=cfg.n_mc, metrics_path=metrics_path,
                            lr_decay=cfg.lr_decay)
        else:
            history = train_baseline(model, post, ds, cfg.iterations,
                                     n_steps=cfg.L, lr=cfg.lr, seed=cfg.seed,
                                     metrics_path=metrics_path, lr_decay=cfg.lr_decay)
    except FloatingPointError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        diverged = True
        history = []
    save_checkpoint(ckpt_path, model, post, extra)
    if diverged:
        return EXIT_DIVERGED
    if history:
        final = history[-1]
        print(f"final loss {final['total']:.4f} "
              f"(prior {final['l_prior']:.4f}, diff {final['l_diff']:.4f}, "
              f"rec {final['l_rec']:.4f})")
        if not np.isfinite(final["total"]):
            return EXIT_DIVERGED
    print(f"wrote {ckpt_path} and {metrics_path}")
    return EXIT_OK


def _baseline_nelbo(model, post, X, n_samples, seed):
    """Monte Carlo bound estimate for the simulation-based posterior."""
    rng = np.random.default_rng(seed)
    totals = np.empty(n_samples)
    for s in range(n_samples):
        l_prior, l_diff, l_rec = elbo_path(model, post, X, 100, rng)
        totals[s] = float(ad.value(l_prior)) + float(ad.value(l_diff)) + float(ad.value(l_rec))
    return float(np.mean(totals)), float(np.std(totals, ddof=1) / np.sqrt(n_samples))


def _terminal_posterior_samples(model, post, X, n_paths, seed):
    """Posterior samples at the last observation time.

    The matching posterior gives them directly from its marginals; the
    conventional posterior has to integrate its SDE from t=0.
    """
    if isinstance(post, PosteriorReparam):
        rng = np.random.default_rng(seed)
        ctx = post.encode(X)
        eps = rng.standard_normal((n_paths, model.d_latent))
        return post.sample(ctx, np.full(n_paths, float(X.ts[-1])), eps)
    ctx = post.encode(X)
    rng = np.random.default_rng(seed)
    mu, sig = post.initial_dist(ctx)
    mu, sig = np.asarray(ad.value(mu)), np.asarray(ad.value(sig))
    z0 = mu + sig * rng.standard_normal((n_paths, model.d_latent))
    grid = np.unique(np.concatenate([np.linspace(0.0, float(X.ts[-1]), 101),
                                     np.asarray(X.ts, float)]))
    traj = euler_maruyama(lambda z, t: post.drift(z, t, ctx),
                          lambda z, t: model.diffusion(z, t), z0, grid, seed)
    return traj.states[-1]


def _forecast_mse(model, post, X, n_paths, seed, holdout_frac=0.25):
    """Forecast MSE on held-out tail observations vs constant-last-value."""
    n = len(X)
    k = max(1, int(round(holdout_frac * n)))
    if n - k < 2:
        return None
    from .datasets import TimeSeries
    X_cond = TimeSeries(X.ts[:n - k], X.xs[:n - k])
    held_ts, held_xs = X.ts[n - k:], X.xs[n - k:]

    z_last = _terminal_posterior_samples(model, post, X_cond, n_paths, seed)
    grid = np.concatenate([[float(X_cond.ts[-1])], held_ts])
    traj = euler_maruyama(model.drift, model.diffusion, z_last, grid, seed + 1)
    preds = np.array([model.decode(traj.states[i + 1]).mean(axis=0)
                      for i in range(len(held_ts))])
    mse = float(np.mean((preds - held_xs) ** 2))
    const = float(np.mean((X_cond.xs[-1][None, :] - held_xs) ** 2))
    return mse, const


def cmd_evaluate(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    model, post, extra = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.meta["d_obs"] != model.d_obs:
        raise ShapeError("evaluate", (ds.meta["d_obs"],), (model.d_obs,))
    write_resolved_config(out_dir, cfg)
    rows = []
    for sid, X in enumerate(ds.series):
        if isinstance(post, PosteriorReparam):
            nelbo, se, _ = nelbo_estimate(model, post, X, n_samples=cfg.eval_samples,
                                          seed=cfg.seed + sid)
        else:
            nelbo, se = _baseline_nelbo(model, post, X, min(cfg.eval_samples, 64),
                                        cfg.seed + sid)
        fc = _forecast_mse(model, post, X, cfg.paths, cfg.seed + 1000 + sid)
        mse, const = fc if fc is not None else (float("nan"), float("nan"))
        rows.append({
            "series": sid, "n_obs": len(X),
            "nelbo": nelbo, "nelbo_se": se, "nelbo_per_obs": nelbo / len(X),
            "forecast_mse": mse, "constant_baseline_mse": const,
        })
    report = os.path.join(out_dir, "report.csv")
    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"series {r['series']}: nelbo {r['nelbo']:.4f} +- {r['nelbo_se']:.4f} "
              f"({r['nelbo_per_obs']:.4f}/obs), forecast mse {r['forecast_mse']:.4f} "
              f"vs constant {r['constant_baseline_mse']:.4f}")
    print(f"wrote {report}")
    return EXIT_OK


def cmd_sample(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    model, _, _ = load_checkpoint(args.checkpoint)
    write_resolved_config(out_dir, cfg)
    grid = np.linspace(0.0, cfg.horizon, 201)
    traj, obs = sample_prior(model, grid, cfg.paths, cfg.seed)
    path = os.path.join(out_dir, "samples.csv")
    dump_trajectories(path, traj, obs)
    print(f"wrote {path}: {cfg.paths} paths x {len(grid)} times")
    return EXIT_OK


def cmd_forecast(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    model, post, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    X = ds.series[args.series]
    write_resolved_config(out_dir, cfg)
    t_last = float(X.ts[-1])
    grid = t_last + np.linspace(0.0, cfg.horizon, 101)
    if isinstance(post, PosteriorReparam):
        traj = forecast(model, post, X, grid, cfg.paths, cfg.seed)
    else:
        z_last = _terminal_posterior_samples(model, post, X, cfg.paths, cfg.seed)
        traj = euler_maruyama(model.drift, model.diffusion, z_last, grid, cfg.seed + 1)
    path = os.path.join(out_dir, "forecast.csv")
    dump_trajectories(path, traj)
    print(f"wrote {path}: {cfg.paths} paths over [{grid[0]:.3f}, {grid[-1]:.3f}]")
    return EXIT_OK


COMPARE_FIELDS = ["method", "T_or_L", "mean_log10_gradnorm", "std", "wall_ms",
                  "tape_nodes"]


def cmd_compare(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    write_resolved_config(out_dir, cfg)
    rows = []

    horizons = [1.0, 2.0, 5.0, 10.0]
    for method in METHODS:
        for r in grad_norm_vs_horizon(horizons, method, n_seeds=args.n_seeds,
                                      n_steps=cfg.L, n_obs=cfg.n_obs,
                                      data_seed=cfg.seed, init_seed=cfg.seed,
                                      d_latent=cfg.d_latent, hidden=cfg.hidden,
                                      context=cfg.context):
            rows.append({
                "method": method, "T_or_L": f"T={r['T']:g}",
                "mean_log10_gradnorm": r["mean_log10"], "std": r["std_log10"],
                "wall_ms": float("nan"), "tape_nodes": "",
            })

    ds = gen_linear(n_obs=cfg.n_obs, horizon=1.0, seed=cfg.seed)
    X = ds.series[0]
    for L in (10, 50, 100, 200):
        for method in METHODS:
            model = _build_model(cfg, ds.meta["d_obs"])
            times, log_norms, nodes = [], [], None
            # matching never consumes L; keep its noise identical across rows
            # so the node-count column isolates the step-count knob
            seed_l = 0 if method == "matching" else L
            rng = np.random.default_rng([cfg.seed, seed_l, method == "matching"])
            if method == "matching":
                post = PosteriorReparam(ds.meta["d_obs"], cfg.d_latent,
                                        context=cfg.context, hidden=cfg.hidden,
                                        t_max=1.0, seed=cfg.seed + 1)
                for _ in range(args.timing_reps):
                    t0 = time.perf_counter()
                    _, grads, bad, nodes = objective_gradients(model, post, X, rng)
                    times.append((time.perf_counter() - t0) * 1e3)
                    if bad is None:
                        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                        log_norms.append(np.log10(norm))
            else:
                post = ConventionalPosterior(ds.meta["d_obs"], cfg.d_latent,
                                             context=cfg.context, hidden=cfg.hidden,
                                             seed=cfg.seed + 1)
                opt = Adam(lr=0.0)
                for _ in range(args.timing_reps):
                    _, grad_norm, nodes, wall_ms = baseline_training_step(
                        model, post, X, L, opt, rng)
                    times.append(wall_ms)
                    if np.isfinite(grad_norm) and grad_norm > 0:
                        log_norms.append(np.log10(grad_norm))
            rows.append({
                "method": method, "T_or_L": f"L={L}",
                "mean_log10_gradnorm": float(np.mean(log_norms)),
                "std": float(np.std(log_norms, ddof=1)) if len(log_norms) > 1 else 0.0,
                "wall_ms": float(np.median(times)),
                "tape_nodes": nodes,
            })

    path = os.path.join(out_dir, "compare.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"{r['method']:>9} {r['T_or_L']:>6}: "
              f"log10|grad| {r['mean_log10_gradnorm']:.3f} +- {r['std']:.3f}, "
              f"wall {r['wall_ms']:.2f} ms, nodes {r['tape_nodes']}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_kalman_check(args):
    cfg = resolve_config(args)
    out_dir = _ensure_out_dir(args.out_dir)
    ds = load_dataset(args.data)
    if ds.meta.get("system") != "linear":
        raise ConfigError(f"kalman-check needs the linear system, got "
                          f"{ds.meta.get('system')!r}")
    spec = LinearSystemSpec(F=lambda t: -t, L=lambda t: t, H=1.0,
                            R=ds.meta.get("obs_var", 0.01), m0=0.0, P0=1.0)
    write_resolved_config(out_dir, cfg)
    rows = []
    for sid, X in enumerate(ds.series):
        ll = kalman_loglik(spec, X)
        rows.append({"series": sid, "n_obs": len(X), "loglik": ll,
                     "loglik_per_obs": ll / len(X)})
        print(f"series {sid}: exact log-likelihood {ll:.6f} "
              f"({ll / len(X):.6f}/obs)")
    path = os.path.join(out_dir, "kalman.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key=value config file")
    for f in fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, type=str, default=None, metavar="BOOL",
                                help=f"override {f.name} (default {default})")
        else:
            parser.add_argument(flag, type=type(default), default=None,
                                help=f"override {f.name} (default {default})")


def _coerce_bool_flags(args):
    for f in fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        if isinstance(default, bool):
            raw = getattr(args, f.name, None)
            if isinstance(raw, str):
                setattr(args, f.name, _parse_value(f.name, raw, bool))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdematch",
        description="Simulation-free variational training of latent SDEs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="NELBO and forecast report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sample", help="sample the generative process")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("forecast", help="forecast beyond a series' last observation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--series", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("compare", help="gradient-horizon, timing and tape-size table")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--timing-reps", type=int, default=5)
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("kalman-check", help="exact log-likelihood of a linear dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_kalman_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _coerce_bool_flags(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"i/o error: malformed input file ({exc})", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
