"""Latent SDE model and the reparameterized posterior process.

The generative side is an SDE ``dz = h(z,t) dt + g(z,t) dw`` with a diagonal,
coordinatewise state-dependent diffusion, a Gaussian initial prior and a
diagonal-Gaussian observation likelihood.  The posterior is defined through
its marginals: ``z_t = mu(X,t) + sigma(X,t) * eps`` with a reverse-time
recurrent context encoder feeding the mean/scale heads.  From that map we get
the score, the marginal-generating ODE drift (time derivative along fixed
noise) and the posterior SDE drift in closed composition.

All evaluation functions accept either a single state (``z`` of shape (D,),
scalar ``t``) or a batch (``z`` of shape (B, D), ``t`` of shape (B,)), and run
on plain arrays, tape ``Var``s or ``Dual``s alike.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from . import nets

LOG2PI = float(np.log(2.0 * np.pi))


def _with_time(z, t):
    """Concatenate a time channel onto a state vector or batch."""
    if np.ndim(ad.value(z)) == 1:
        return ad.concat([z, ad.reshape(t, (1,))])
    return ad.concat([z, ad.reshape(t, (-1, 1))], axis=-1)


class LatentSDEModel:
    """Prior dynamics, initial prior and observation likelihood."""

    def __init__(self, d_latent, d_obs, hidden=64, g_min=1e-4,
                 state_dependent_g=True, seed=0):
        self.d_latent = d_latent
        self.d_obs = d_obs
        self.hidden = hidden
        self.g_min = g_min
        self.state_dependent_g = state_dependent_g
        self.seed = seed
        rng = np.random.default_rng(seed)
        params = {}
        params.update(nets.init_mlp(rng, [d_latent + 1, hidden, hidden, d_latent], "h"))
        # zero final layer: diffusion starts state-independent
        params.update(nets.init_mlp(rng, [2, hidden, hidden, 1], "g", zero_final=True))
        params["mu0"] = np.zeros(d_latent)
        params["logsig0"] = np.zeros(d_latent)
        params.update(nets.init_mlp(rng, [d_latent, hidden, hidden, d_obs], "dec"))
        params["logr"] = np.full(d_obs, -1.0)
        self.params = params

    def config(self):
        return {
            "d_latent": self.d_latent, "d_obs": self.d_obs, "hidden": self.hidden,
            "g_min": self.g_min, "state_dependent_g": self.state_dependent_g,
            "seed": self.seed,
        }

    # -- prior dynamics -----------------------------------------------------

    def drift(self, z, t, p=None):
        """Prior drift h(z, t)."""
        p = self.params if p is None else p
        return nets.mlp_apply(p, "h", _with_time(z, t))

    def _g_coord(self, zk, t, p):
        """Diagonal diffusion entry from inputs (z_k, t); floored softplus."""
        out = nets.mlp_apply(p, "g", _with_time(zk, t))
        return ad.add(ad.softplus(out), self.g_min)

    def diffusion(self, z, t, p=None):
        """Diagonal of g(z, t); entry k depends only on coordinate k (and t)."""
        p = self.params if p is None else p
        cols = []
        for k in range(self.d_latent):
            zk = ad.take(z, k, k + 1)
            if not self.state_dependent_g:
                zk = ad.scale(zk, 0.0)
            cols.append(self._g_coord(zk, t, p))
        return ad.concat(cols, axis=-1)

    def diffusion_with_div(self, z, t, p=None):
        """Diagonal of g plus the coordinatewise divergence d(g_kk^2)/dz_k.

        The derivative in z_k is taken by forward mode; it is exactly zero for
        a state-independent diffusion.
        """
        p = self.params if p is None else p
        g_cols, div_cols = [], []
        for k in range(self.d_latent):
            zk = ad.take(z, k, k + 1)
            if not self.state_dependent_g:
                g = self._g_coord(ad.scale(zk, 0.0), t, p)
                g_cols.append(g)
                div_cols.append(np.zeros(np.shape(ad.value(g))))
                continue
            tangent = np.ones(np.shape(ad.value(zk)))
            gd = self._g_coord(ad.Dual(zk, tangent), ad.Dual(t), p)
            g_cols.append(gd.primal)
            div_cols.append(ad.scale(ad.mul(gd.primal, gd.tangent), 2.0))
        return ad.concat(g_cols, axis=-1), ad.concat(div_cols, axis=-1)

    # -- initial prior ------------------------------------------------------

    def init_mean_std(self, p=None):
        p = self.params if p is None else p
        return p["mu0"], ad.exp(p["logsig0"])

    def sample_z0(self, rng, n=1):
        """Draw from the initial prior; returns (n, D)."""
        mu0, sig0 = self.params["mu0"], np.exp(self.params["logsig0"])
        return mu0 + sig0 * rng.standard_normal((n, self.d_latent))

    # -- observation model --------------------------------------------------

    def decode(self, z, p=None):
        p = self.params if p is None else p
        return nets.mlp_apply(p, "dec", z)

    def obs_loglik(self, x, z, p=None):
        """Diagonal Gaussian log-density log p(x | z); scalar (or (B,) batch)."""
        p = self.params if p is None else p
        if np.shape(ad.value(x))[-1] != self.d_obs:
            raise ad.ShapeError("obs_loglik", np.shape(ad.value(x)), (self.d_obs,))
        mean = self.decode(z, p)
        logr = p["logr"]
        r = ad.exp(logr)
        resid = ad.div(ad.sub(x, mean), r)
        quad = ad.vsum(ad.square(resid), axis=-1)
        return ad.sub(
            ad.scale(quad, -0.5),
            ad.add(ad.vsum(logr), 0.5 * self.d_obs * LOG2PI),
        )


class EncodedContext:
    """Reverse-time context states, interpolated piecewise-linearly in t.

    The encoder produces one hidden state per observation time; queries
    between neighbouring observation times blend the two bracketing states
    linearly, and queries outside [t_1, t_N] clamp to the nearest state.
    Continuity in t keeps the posterior marginals free of jumps, so the
    variational bound stays valid; the time derivative of the context is the
    piecewise-constant interpolation slope.
    """

    def __init__(self, ts, states, stacked=None):
        self.ts = np.asarray(ts, dtype=np.float64)
        self.states = states          # list of length N (training mode)
        self.stacked = stacked        # (N, H) ndarray (fast mode)

    def _segment(self, tv):
        """Bracketing index j and blend weight alpha for scalar time tv."""
        n = len(self.ts)
        j = int(np.searchsorted(self.ts, tv, side="left"))
        if n == 1 or j <= 0:
            return 0, 0.0
        if j >= n:
            return n - 1, 0.0
        return j, float((tv - self.ts[j - 1]) / (self.ts[j] - self.ts[j - 1]))

    def at(self, t):
        """Context at query time t (scalar or batch)."""
        c, _ = self.at_dual(t)
        return c

    def at_dual(self, t):
        """(context, d(context)/dt) at query time t (scalar or batch)."""
        tv = ad.value(t)
        if np.ndim(tv) == 0:
            j, alpha = self._segment(float(tv))
            states = self.states if self.stacked is None else self.stacked
            if alpha == 0.0:
                return states[j], np.zeros(np.shape(ad.value(states[j])))
            dt = self.ts[j] - self.ts[j - 1]
            c = ad.add(ad.scale(states[j - 1], 1.0 - alpha), ad.scale(states[j], alpha))
            dcdt = ad.scale(ad.sub(states[j], states[j - 1]), 1.0 / dt)
            return c, dcdt
        ts, h = self.ts, self.stacked
        n = len(ts)
        if n == 1:
            c = np.broadcast_to(h[0], (len(tv), h.shape[1]))
            return c, np.zeros_like(c)
        j = np.clip(np.searchsorted(ts, tv, side="left"), 1, n - 1)
        dt = ts[j] - ts[j - 1]
        alpha = np.clip((tv - ts[j - 1]) / dt, 0.0, 1.0)
        c = (1.0 - alpha)[:, None] * h[j - 1] + alpha[:, None] * h[j]
        dcdt = np.where(((tv > ts[0]) & (tv <= ts[-1]))[:, None],
                        (h[j] - h[j - 1]) / dt[:, None], 0.0)
        return c, dcdt

    def bridge_dual(self, t):
        """Bridge coordinate phi = alpha(1-alpha)*dt and d(phi)/dt.

        Zero at every observation time and outside [t_1, t_N], so it is
        continuous in t; within a segment it is the parabola a Brownian
        bridge's variance follows, giving the marginal heads a handle on
        intra-segment structure that the linear context blend smooths away.
        """
        tv = ad.value(t)
        ts = self.ts
        n = len(ts)
        if np.ndim(tv) == 0:
            j, alpha = self._segment(float(tv))
            if alpha == 0.0:
                return 0.0, 0.0
            dt = ts[j] - ts[j - 1]
            # alpha == 1.0 only at observation times; keep the left-segment
            # derivative convention of the batched path
            return alpha * (1.0 - alpha) * dt, 1.0 - 2.0 * alpha
        if n == 1:
            return np.zeros_like(tv), np.zeros_like(tv)
        j = np.clip(np.searchsorted(ts, tv, side="left"), 1, n - 1)
        dt = ts[j] - ts[j - 1]
        alpha = np.clip((tv - ts[j - 1]) / dt, 0.0, 1.0)
        inside = (tv > ts[0]) & (tv <= ts[-1])
        phi = np.where(inside, alpha * (1.0 - alpha) * dt, 0.0)
        dphi = np.where(inside, 1.0 - 2.0 * alpha, 0.0)
        return phi, dphi


def encode_series(params, context_dim, X, prefix="enc"):
    """Run a reverse-time GRU over (t_i, x_i) observation features.

    Shared by the matching posterior and the simulation-based baseline, which
    use the same context architecture with their own parameters.
    """
    ts, xs = np.asarray(X.ts, float), np.asarray(X.xs, float)
    n = len(ts)
    if n == 0:
        raise ValueError("empty observation series")
    h = np.zeros(context_dim)
    states = [None] * n
    for i in range(n - 1, -1, -1):
        feat = np.concatenate([[ts[i]], xs[i]])
        h = nets.gru_step(params, prefix, h, feat)
        states[i] = h
    fast = not any(isinstance(s, ad.Var) for s in states)
    stacked = np.stack([ad.value(s) for s in states]) if fast else None
    return EncodedContext(ts, states, stacked)


class PosteriorReparam:
    """Noise-to-latent map ``z_t = mu(X,t) + sigma(X,t) * eps``."""

    def __init__(self, d_obs, d_latent, context=32, hidden=64,
                 sigma_floor=1e-4, t_max=1.0, seed=0):
        self.d_obs = d_obs
        self.d_latent = d_latent
        self.context = context
        self.hidden = hidden
        self.sigma_floor = sigma_floor
        self.t_max = t_max
        self.seed = seed
        rng = np.random.default_rng(seed)
        params = {}
        params.update(nets.init_gru(rng, 1 + d_obs, context, "enc"))
        params.update(nets.init_mlp(rng, [context + 2, hidden, hidden, d_latent], "mu"))
        params.update(nets.init_mlp(rng, [context + 2, hidden, hidden, d_latent], "sig"))
        self.params = params

    def config(self):
        return {
            "d_obs": self.d_obs, "d_latent": self.d_latent, "context": self.context,
            "hidden": self.hidden, "sigma_floor": self.sigma_floor,
            "t_max": self.t_max, "seed": self.seed,
        }

    def _check_t(self, t):
        tv = np.asarray(ad.value(t))
        if np.any(tv < -1e-12) or np.any(tv > self.t_max + 1e-12):
            raise ValueError(f"time {tv} outside [0, {self.t_max}]")

    def encode(self, X, p=None):
        """One reverse-time recurrent pass over (t_i, x_i); O(N) once per query set."""
        p = self.params if p is None else p
        return encode_series(p, self.context, X)

    # -- heads --------------------------------------------------------------

    def _heads_input(self, ctx_t, t, phi):
        if np.ndim(ad.value(t)) == 0:
            return ad.concat([ctx_t, ad.reshape(t, (1,)), ad.reshape(phi, (1,))])
        return ad.concat([ctx_t, ad.reshape(t, (-1, 1)), ad.reshape(phi, (-1, 1))],
                         axis=-1)

    def mu_sigma(self, ctx, t, p=None):
        """Posterior mean and diagonal scale at time t."""
        p = self.params if p is None else p
        self._check_t(t)
        phi, _ = ctx.bridge_dual(t)
        inp = self._heads_input(ctx.at(t), t, phi)
        mu = nets.mlp_apply(p, "mu", inp)
        sigma = ad.add(ad.softplus(nets.mlp_apply(p, "sig", inp)), self.sigma_floor)
        return mu, sigma

    def mu_sigma_dual(self, ctx, t, p=None):
        """(mu, dmu/dt, sigma, dsigma/dt) by one forward-mode pass in t.

        The time derivative flows through the explicit time input, the
        piecewise-linear context interpolation and the bridge coordinate.
        """
        p = self.params if p is None else p
        self._check_t(t)
        t_dual = ad.Dual(t, np.ones(np.shape(ad.value(t))))
        c, dcdt = ctx.at_dual(t)
        phi, dphi = ctx.bridge_dual(t)
        inp = self._heads_input(ad.Dual(c, dcdt), t_dual,
                                ad.Dual(np.asarray(phi), np.asarray(dphi)))
        mu = nets.mlp_apply(p, "mu", inp)
        sigma = ad.add(ad.softplus(nets.mlp_apply(p, "sig", inp)), self.sigma_floor)
        return mu.primal, mu.tangent, sigma.primal, sigma.tangent

    # -- the reparameterization map ----------------------------------------

    def sample(self, ctx, t, eps, p=None):
        """z_t = mu + sigma * eps for caller-supplied standard-normal eps."""
        mu, sigma = self.mu_sigma(ctx, t, p)
        return ad.add(mu, ad.mul(sigma, eps))

    def inverse(self, ctx, t, z, p=None):
        """Recover eps from z_t: (z - mu) / sigma."""
        mu, sigma = self.mu_sigma(ctx, t, p)
        return ad.div(ad.sub(z, mu), sigma)

    def score_from_eps(self, ctx, t, eps, p=None):
        """Gradient of log q(z_t | X) at z_t = mu + sigma*eps: -eps / sigma."""
        _, sigma = self.mu_sigma(ctx, t, p)
        return ad.scale(ad.div(eps, sigma), -1.0)


# ---------------------------------------------------------------------------
# drift construction
# ---------------------------------------------------------------------------

def conditional_ode_drift(reparam, ctx, t, z, p=None):
    """Velocity field generating the posterior marginals.

    Computes eps by inverting the reparameterization at z, then the time
    derivative of the map along that fixed noise:
    ``mu_dot + sigma_dot * (z - mu) / sigma``.
    """
    mu, mu_dot, sigma, sigma_dot = reparam.mu_sigma_dual(ctx, t, p)
    eps = ad.div(ad.sub(z, mu), sigma)
    f = ad.add(mu_dot, ad.mul(sigma_dot, eps))
    if not np.all(np.isfinite(ad.value(f))):
        raise FloatingPointError("non-finite conditional ODE drift")
    return f


def posterior_sde_drift_parts(mu_dot, sigma, sigma_dot, eps, g, div_g2):
    """Posterior SDE drift from precomputed pieces.

    ``f = f_bar + (1/2) g^2 * score + (1/2) d(g^2)/dz`` with diagonal g and
    score ``-eps / sigma``.
    """
    f_bar = ad.add(mu_dot, ad.mul(sigma_dot, eps))
    score = ad.scale(ad.div(eps, sigma), -1.0)
    return ad.add(
        f_bar,
        ad.add(ad.scale(ad.mul(ad.square(g), score), 0.5), ad.scale(div_g2, 0.5)),
    )


def posterior_sde_drift(model, reparam, ctx, t, eps, p_model=None, p_post=None):
    """Drift of the posterior SDE at z_t = mu + sigma*eps.

    Returns (f, z_t, g) with g the diagonal diffusion at (z_t, t), so callers
    forming the whitened residual reuse one evaluation.
    """
    mu, mu_dot, sigma, sigma_dot = reparam.mu_sigma_dual(ctx, t, p_post)
    z = ad.add(mu, ad.mul(sigma, eps))
    g, div_g2 = model.diffusion_with_div(z, t, p_model)
    f = posterior_sde_drift_parts(mu_dot, sigma, sigma_dot, eps, g, div_g2)
    return f, z, g


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, reparam, extra=None):
    """Write all parameter tensors plus a metadata header; bitwise round-trip."""
    meta = {"model": model.config(), "posterior": reparam.config(),
            "posterior_kind": type(reparam).__name__, "extra": extra or {}}
    arrays = {f"model/{k}": v for k, v in model.params.items()}
    arrays.update({f"post/{k}": v for k, v in reparam.params.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild (model, reparam, extra-metadata) from a checkpoint file."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode())
        model = LatentSDEModel(**meta["model"])
        kind = meta.get("posterior_kind", "PosteriorReparam")
        if kind == "PosteriorReparam":
            reparam = PosteriorReparam(**meta["posterior"])
        else:
            from .baseline import ConventionalPosterior
            reparam = ConventionalPosterior(**meta["posterior"])
        for k in model.params:
            model.params[k] = data[f"model/{k}"].copy()
        for k in reparam.params:
            reparam.params[k] = data[f"post/{k}"].copy()
    return model, reparam, meta["extra"]
