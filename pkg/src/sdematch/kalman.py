"""Exact linear-Gaussian oracles: continuous-discrete Kalman filter
log-likelihood and RTS smoother marginals.

The latent process is ``dz = F(t) z dt + L(t) dw`` with Gaussian initial
state, observed at discrete times through ``x = H z + noise``.  Moments and
state-transition matrices between grid points are integrated with RK4 on
``dm/dt = F m``, ``dP/dt = F P + P F' + L L'``, ``dPhi/dt = F Phi``.
"""

from __future__ import annotations

import numpy as np


def _as_matrix_fn(a, d):
    """Normalize a scalar, array or callable-of-t into t -> (d, d) array."""
    if callable(a):
        return lambda t: np.atleast_2d(np.asarray(a(t), dtype=np.float64))
    arr = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return lambda t: arr


class LinearSystemSpec:
    """Continuous-discrete linear-Gaussian state-space specification."""

    def __init__(self, F, L, H, R, m0, P0):
        self.m0 = np.atleast_1d(np.asarray(m0, dtype=np.float64))
        self.d = len(self.m0)
        self.P0 = np.atleast_2d(np.asarray(P0, dtype=np.float64))
        self.F = _as_matrix_fn(F, self.d)
        self.L = _as_matrix_fn(L, self.d)
        self.H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(R, dtype=np.float64))
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ValueError("observation noise covariance must be positive definite")

    @classmethod
    def default_linear(cls):
        """The scalar benchmark system F(t) = -t, L(t) = t, H = 1, R = 0.01."""
        return cls(F=lambda t: -t, L=lambda t: t, H=1.0, R=0.01, m0=0.0, P0=1.0)


def _rk4_segment(spec, m, P, Phi, t0, t1, step):
    """Integrate moments and transition matrix from t0 to t1."""
    span = t1 - t0
    if span <= 0:
        return m, P, Phi
    n = max(1, int(np.ceil(span / step)))
    h = span / n

    def deriv(t, state):
        m_, P_, Phi_ = state
        F = spec.F(t)
        L = spec.L(t)
        return (F @ m_, F @ P_ + P_ @ F.T + L @ L.T, F @ Phi_)

    state = (m, P, Phi)
    t = t0
    for _ in range(n):
        k1 = deriv(t, state)
        k2 = deriv(t + h / 2, tuple(s + h / 2 * k for s, k in zip(state, k1)))
        k3 = deriv(t + h / 2, tuple(s + h / 2 * k for s, k in zip(state, k2)))
        k4 = deriv(t + h, tuple(s + h * k for s, k in zip(state, k3)))
        state = tuple(
            s + h / 6 * (a + 2 * b + 2 * c + d)
            for s, a, b, c, d in zip(state, k1, k2, k3, k4)
        )
        t += h
    return state


def _forward_pass(spec, ts, xs, obs_mask, step):
    """Filter over a grid; update only where obs_mask is set.

    Returns per-grid-point predicted/filtered moments, transitions and the
    accumulated log-likelihood.
    """
    d = spec.d
    ts = np.asarray(ts, dtype=np.float64)
    m, P = spec.m0.copy(), spec.P0.copy()
    t_prev = 0.0
    loglik = 0.0
    recs = []
    for i, t in enumerate(ts):
        Phi = np.eye(d)
        m_pred, P_pred, A = _rk4_segment(spec, m, P, Phi, t_prev, t, step)
        rec = {"t": t, "m_pred": m_pred, "P_pred": P_pred, "A": A}
        if obs_mask[i]:
            x = np.atleast_1d(xs[i])
            S = spec.H @ P_pred @ spec.H.T + spec.R
            sign, logdet = np.linalg.slogdet(S)
            if sign <= 0:
                raise ValueError(f"non-positive innovation covariance at t={t}")
            innov = x - spec.H @ m_pred
            loglik += -0.5 * (len(x) * np.log(2 * np.pi) + logdet
                              + innov @ np.linalg.solve(S, innov))
            K = P_pred @ spec.H.T @ np.linalg.inv(S)
            m = m_pred + K @ innov
            P = P_pred - K @ S @ K.T
        else:
            m, P = m_pred, P_pred
        rec["m_filt"], rec["P_filt"] = m.copy(), P.copy()
        recs.append(rec)
        t_prev = t
    return recs, loglik


def kalman_loglik(spec, X, step=1e-4, extra_times=None):
    """Exact log p(X) up to discretization of the moment ODEs."""
    ts = np.asarray(X.ts, dtype=np.float64)
    xs = np.asarray(X.xs, dtype=np.float64)
    if extra_times is None:
        grid = ts
        mask = np.ones(len(ts), dtype=bool)
        obs = xs
    else:
        grid = np.unique(np.concatenate([ts, np.asarray(extra_times, float)]))
        mask = np.isin(grid, ts)
        obs = np.zeros((len(grid), xs.shape[1]))
        obs[mask] = xs
    _, loglik = _forward_pass(spec, grid, obs, mask, step)
    return float(loglik)


def kalman_smoother_marginals(spec, X, query_times, step=1e-4):
    """Exact posterior marginals p(z_t | X): (mean, cov) per query time."""
    ts = np.asarray(X.ts, dtype=np.float64)
    xs = np.asarray(X.xs, dtype=np.float64)
    query_times = np.asarray(query_times, dtype=np.float64)
    grid = np.unique(np.concatenate([ts, query_times]))
    mask = np.isin(grid, ts)
    obs = np.zeros((len(grid), xs.shape[1]))
    obs[mask] = xs[np.searchsorted(ts, grid[mask])]
    recs, _ = _forward_pass(spec, grid, obs, mask, step)

    n = len(recs)
    means = [None] * n
    covs = [None] * n
    means[-1] = recs[-1]["m_filt"]
    covs[-1] = recs[-1]["P_filt"]
    for i in range(n - 2, -1, -1):
        nxt = recs[i + 1]
        A = nxt["A"]
        G = recs[i]["P_filt"] @ A.T @ np.linalg.inv(nxt["P_pred"])
        means[i] = recs[i]["m_filt"] + G @ (means[i + 1] - nxt["m_pred"])
        covs[i] = recs[i]["P_filt"] + G @ (covs[i + 1] - nxt["P_pred"]) @ G.T
    out_means, out_covs = [], []
    for q in query_times:
        i = int(np.searchsorted(grid, q))
        out_means.append(means[i])
        out_covs.append(covs[i])
    return np.array(out_means), np.array(out_covs)
