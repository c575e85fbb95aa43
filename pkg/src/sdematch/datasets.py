"""Synthetic data generators and dataset serialization.

Three systems: a scalar time-varying linear SDE (exact likelihood available
via the Kalman oracle), the 3D stochastic Lorenz attractor, and a stochastic
Lotka-Volterra system with multiplicative noise.  Generators are pure
functions of their seed; series use independent spawned RNG streams so they
can be produced in any order.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TimeSeries:
    """Observation times in [0, T] with vectors x_{t_i}."""

    ts: np.ndarray
    xs: np.ndarray

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        if self.xs.shape[0] != len(self.ts):
            raise ValueError(f"times/observations mismatch: {len(self.ts)} vs {self.xs.shape}")
        if len(self.ts) > 1 and np.any(np.diff(self.ts) <= 0):
            raise ValueError("observation times must be strictly increasing")

    def __len__(self):
        return len(self.ts)


@dataclass
class Dataset:
    series: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _series_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _obs_times(n_obs, horizon):
    return horizon * np.arange(1, n_obs + 1) / n_obs


# ---------------------------------------------------------------------------
# linear system (App-style coefficients F(t) = -t, L(t) = t)
# ---------------------------------------------------------------------------

def gen_linear(n_obs=20, horizon=1.0, n_series=1, seed=0, obs_var=0.01, dt=1e-4):
    """Scalar linear SDE dz = -t z dt + t dw, observed as x = z + noise."""
    ts = _obs_times(n_obs, horizon)
    series = []
    for rng in _series_rngs(seed, n_series):
        grid = np.arange(0.0, horizon + dt / 2, dt)
        z = rng.standard_normal()
        path = np.empty(len(grid))
        path[0] = z
        noise = rng.standard_normal(len(grid) - 1)
        for i in range(len(grid) - 1):
            t = grid[i]
            z = z + (-t * z) * dt + t * np.sqrt(dt) * noise[i]
            path[i + 1] = z
        idx = np.clip(np.round(ts / dt).astype(int), 0, len(grid) - 1)
        lat = path[idx]
        xs = lat[:, None] + np.sqrt(obs_var) * rng.standard_normal((n_obs, 1))
        series.append(TimeSeries(ts, xs))
    meta = {"system": "linear", "n_obs": n_obs, "horizon": horizon,
            "n_series": n_series, "seed": seed, "obs_var": obs_var, "dt": dt,
            "d_obs": 1}
    return Dataset(series, meta)


# ---------------------------------------------------------------------------
# stochastic Lorenz attractor
# ---------------------------------------------------------------------------

def gen_lorenz(n_obs=30, horizon=1.0, n_series=1, seed=0, sigma_rho_beta=(10.0, 28.0, 8.0 / 3.0),
               diff=0.3, obs_var=0.01, dt=1e-4, z0=(1.0, 1.0, 1.0), z0_spread=0.1,
               normalize=True):
    """3D Lorenz SDE with additive diffusion; all coordinates observed."""
    s, r, b = sigma_rho_beta
    ts = _obs_times(n_obs, horizon)
    all_lat = []
    for rng in _series_rngs(seed, n_series):
        grid = np.arange(0.0, horizon + dt / 2, dt)
        z = np.asarray(z0, float) + z0_spread * rng.standard_normal(3)
        path = np.empty((len(grid), 3))
        path[0] = z
        noise = rng.standard_normal((len(grid) - 1, 3))
        for i in range(len(grid) - 1):
            drift = np.array([s * (z[1] - z[0]),
                              z[0] * (r - z[2]) - z[1],
                              z[0] * z[1] - b * z[2]])
            z = z + drift * dt + diff * np.sqrt(dt) * noise[i]
            if np.max(np.abs(z)) > 1e6:
                raise FloatingPointError(f"Lorenz trajectory blew up at step {i}")
            path[i + 1] = z
        idx = np.clip(np.round(ts / dt).astype(int), 0, len(grid) - 1)
        all_lat.append(path[idx])
    rng_obs = np.random.default_rng(np.random.SeedSequence(seed).spawn(n_series + 1)[-1])
    raw = [lat + np.sqrt(obs_var) * rng_obs.standard_normal(lat.shape) for lat in all_lat]
    if normalize:
        stackd = np.concatenate(raw)
        shift, scl = stackd.mean(axis=0), stackd.std(axis=0)
        scl = np.where(scl > 0, scl, 1.0)
        raw = [(x - shift) / scl for x in raw]
    else:
        shift, scl = np.zeros(3), np.ones(3)
    series = [TimeSeries(ts, x) for x in raw]
    meta = {"system": "lorenz", "n_obs": n_obs, "horizon": horizon,
            "n_series": n_series, "seed": seed, "sigma_rho_beta": list(sigma_rho_beta),
            "diff": diff, "obs_var": obs_var, "dt": dt, "z0": list(z0),
            "z0_spread": z0_spread, "normalize": normalize,
            "shift": shift.tolist(), "scale": scl.tolist(), "d_obs": 3}
    return Dataset(series, meta)


# ---------------------------------------------------------------------------
# stochastic Lotka-Volterra with multiplicative noise
# ---------------------------------------------------------------------------

def lv_first_integral(x, y, alpha, beta, delta, gamma):
    """Conserved quantity of the deterministic system (sigma = 0)."""
    return delta * x + gamma * np.log(x) - beta * y - alpha * np.log(y)


def gen_lotka_volterra(alpha=2.0 / 3.0, beta=-4.0 / 3.0, delta=1.0, gamma=-1.0,
                       sigma=0.15, n_obs=32, horizon=10.0, n_series=1, seed=0,
                       x0=(1.5, 1.0), obs_std=0.05, dt=1e-3):
    """dx = (a x + b x y)dt + s x dw, dy = (d x y + g y)dt + s y dw.

    Integrated in log-space to preserve positivity; a zero coordinate is
    absorbing and stays at zero.
    """
    ts = _obs_times(n_obs, horizon)
    series = []
    for rng in _series_rngs(seed, n_series):
        grid = np.arange(0.0, horizon + dt / 2, dt)
        state = np.asarray(x0, float)
        if np.any(state < 0):
            raise ValueError("initial populations must be non-negative")
        alive = state > 0
        u = np.where(alive, np.log(np.where(alive, state, 1.0)), -np.inf)
        path = np.empty((len(grid), 2))
        path[0] = state
        noise = rng.standard_normal((len(grid) - 1, 2))
        for i in range(len(grid) - 1):
            x, y = state
            # Ito drift of log-coordinates
            du = np.array([alpha + beta * y - 0.5 * sigma ** 2,
                           delta * x + gamma - 0.5 * sigma ** 2])
            u = np.where(alive, u + du * dt + sigma * np.sqrt(dt) * noise[i], u)
            state = np.where(alive, np.exp(u), 0.0)
            path[i + 1] = state
        idx = np.clip(np.round(ts / dt).astype(int), 0, len(grid) - 1)
        lat = path[idx]
        xs = lat + obs_std * rng.standard_normal(lat.shape)
        series.append(TimeSeries(ts, xs))
    meta = {"system": "lotka-volterra", "n_obs": n_obs, "horizon": horizon,
            "n_series": n_series, "seed": seed,
            "alpha": alpha, "beta": beta, "delta": delta, "gamma": gamma,
            "sigma": sigma, "x0": list(x0), "obs_std": obs_std, "dt": dt,
            "d_obs": 2}
    return Dataset(series, meta)


# ---------------------------------------------------------------------------
# serialization: JSON metadata line, then CSV rows (series_id, t, x_1..x_dx)
# ---------------------------------------------------------------------------

def dumps_dataset(ds):
    d_obs = ds.series[0].xs.shape[1] if ds.series else ds.meta.get("d_obs", 0)
    buf = io.StringIO()
    buf.write(json.dumps(ds.meta, sort_keys=True) + "\n")
    buf.write("series_id,t," + ",".join(f"x_{j + 1}" for j in range(d_obs)) + "\n")
    for sid, s in enumerate(ds.series):
        for t, x in zip(s.ts, s.xs):
            buf.write(f"{sid},{float(t)!r}," + ",".join(repr(float(v)) for v in x) + "\n")
    return buf.getvalue()


def save_dataset(path, ds):
    with open(path, "w") as fh:
        fh.write(dumps_dataset(ds))


def load_dataset(path):
    with open(path) as fh:
        meta = json.loads(fh.readline())
        fh.readline()  # column header
        rows = [line.strip().split(",") for line in fh if line.strip()]
    series = []
    for sid in sorted({int(r[0]) for r in rows}):
        rs = [r for r in rows if int(r[0]) == sid]
        ts = np.array([float(r[1]) for r in rs])
        xs = np.array([[float(v) for v in r[2:]] for r in rs])
        series.append(TimeSeries(ts, xs))
    return Dataset(series, meta)
