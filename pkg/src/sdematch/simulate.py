"""Stochastic and deterministic integrators over frozen models.

Everything here runs on the plain-numpy evaluation path (no tapes): the prior
sampler and forecaster are inference-time tools, and the posterior-SDE
integrator exists only to validate that the constructed conditional SDE
really has the marginals defined by the reparameterization map.

Noise uses counter-based Philox streams, one per path, so path p's trajectory
is reproducible independently of how many paths are in the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import posterior_sde_drift_parts


@dataclass
class TrajectoryBatch:
    """States on a shared time grid: times (M,), states (M, P, D)."""

    times: np.ndarray
    states: np.ndarray
    seed: int

    @property
    def n_paths(self):
        return self.states.shape[1]


def _path_noise(seed, n_paths, n_steps, dim):
    """(n_steps, n_paths, dim) standard normals from per-path jumped streams."""
    base = np.random.Philox(key=int(seed))
    noise = np.empty((n_steps, n_paths, dim))
    for p in range(n_paths):
        gen = np.random.Generator(base.jumped(p))
        noise[:, p, :] = gen.standard_normal((n_steps, dim))
    return noise


def euler_maruyama(drift, diffusion, z0, grid, seed):
    """Integrate dz = drift dt + diag(diffusion) dw over an increasing grid.

    ``drift`` and ``diffusion`` map a state batch (P, D) and a time vector
    (P,) to (P, D).  Deterministic given seed; aborts on a non-finite state.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if len(grid) > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    z = np.atleast_2d(np.asarray(z0, dtype=np.float64)).copy()
    n_paths, dim = z.shape
    states = np.empty((len(grid), n_paths, dim))
    states[0] = z
    noise = _path_noise(seed, n_paths, max(len(grid) - 1, 0), dim)
    for n in range(len(grid) - 1):
        t_vec = np.full(n_paths, grid[n])
        dt = grid[n + 1] - grid[n]
        f = drift(z, t_vec)
        g = diffusion(z, t_vec)
        z = z + f * dt + g * np.sqrt(dt) * noise[n]
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite state at integration step {n}")
        states[n + 1] = z
    return TrajectoryBatch(grid, states, int(seed))


def _child_seeds(seed, n):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def sample_prior(model, grid, n_paths, seed):
    """Sample the generative process: z0 from the initial prior, integrate the
    prior SDE, decode observations at every grid time.

    Returns (TrajectoryBatch, observations of shape (M, P, d_obs)).
    """
    s_z0, s_path, s_obs = _child_seeds(seed, 3)
    rng0 = np.random.default_rng(s_z0)
    z0 = model.sample_z0(rng0, n_paths)
    traj = euler_maruyama(model.drift, model.diffusion, z0, grid, s_path)
    m, p, d = traj.states.shape
    mean = model.decode(traj.states.reshape(m * p, d)).reshape(m, p, model.d_obs)
    r = np.exp(model.params["logr"])
    obs = mean + r * np.random.default_rng(s_obs).standard_normal(mean.shape)
    return traj, obs


def forecast(model, reparam, X, grid, n_paths, seed):
    """Forecast beyond the last observation.

    Samples z at the final observation time directly from the posterior
    marginal (no simulation), then integrates the prior SDE over the horizon
    grid.  A single-point grid at t_N returns the posterior samples themselves.
    """
    grid = np.asarray(grid, dtype=np.float64)
    t_last = float(X.ts[-1])
    if grid[0] < t_last - 1e-12:
        raise ValueError(f"horizon grid starts at {grid[0]} before last observation {t_last}")
    s_eps, s_path = _child_seeds(seed, 2)
    ctx = reparam.encode(X)
    eps = np.random.default_rng(s_eps).standard_normal((n_paths, model.d_latent))
    t_vec = np.full(n_paths, t_last)
    z_last = reparam.sample(ctx, t_vec, eps)
    if len(grid) == 1:
        return TrajectoryBatch(grid, z_last[None, :, :], int(seed))
    full = grid if abs(grid[0] - t_last) <= 1e-12 else np.concatenate([[t_last], grid])
    traj = euler_maruyama(model.drift, model.diffusion, z_last, full, s_path)
    keep = len(full) - len(grid)
    return TrajectoryBatch(grid, traj.states[keep:], int(seed))


def simulate_posterior_sde(model, reparam, X, grid, n_paths, seed):
    """Integrate the observation-conditioned SDE from z0 ~ q(z_0|X).

    Validation-only: training never touches this.  The drift inverts the
    reparameterization at the current state to recover the noise coordinate;
    the context interpolation is continuous in t, so the marginals of this
    SDE match the reparameterization map's marginals on the whole grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    s_eps, s_path = _child_seeds(seed, 2)
    ctx = reparam.encode(X)
    eps0 = np.random.default_rng(s_eps).standard_normal((n_paths, model.d_latent))
    z0 = reparam.sample(ctx, np.full(n_paths, grid[0]), eps0)

    def drift(z, t_vec):
        mu, mu_dot, sigma, sigma_dot = reparam.mu_sigma_dual(ctx, t_vec)
        eps = (z - mu) / sigma
        g, div_g2 = model.diffusion_with_div(z, t_vec)
        return posterior_sde_drift_parts(mu_dot, sigma, sigma_dot, eps, g, div_g2)

    def diffusion(z, t_vec):
        return model.diffusion(z, t_vec)

    return euler_maruyama(drift, diffusion, z0, grid, s_path)


def dump_trajectories(path, traj, observations=None):
    """CSV dump with columns (path, t, z_1..z_D[, x_1..x_dx])."""
    m, p, d = traj.states.shape
    d_obs = observations.shape[2] if observations is not None else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["path", "t"] + [f"z_{k + 1}" for k in range(d)]
        header += [f"x_{j + 1}" for j in range(d_obs)]
        writer.writerow(header)
        for pi in range(p):
            for mi in range(m):
                row = [pi, repr(float(traj.times[mi]))]
                row += [repr(float(v)) for v in traj.states[mi, pi]]
                if observations is not None:
                    row += [repr(float(v)) for v in observations[mi, pi]]
                writer.writerow(row)
