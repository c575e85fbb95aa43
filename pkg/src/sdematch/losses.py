"""Variational objective and simulation-free training step.

The objective has three terms: a closed-form Gaussian KL at t=0, a diffusion
term (expected squared whitened drift mismatch over uniform time), and an
observation reconstruction term.  The single-sample estimators follow the
training algorithm exactly: one (t, eps) draw for the diffusion term and one
(i, eps) draw for the reconstruction term per step; a multi-sample variant is
exposed as a knob.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import posterior_sde_drift
from .optim import Adam


@dataclass
class LossBreakdown:
    """Per-term loss values in nats; total is the exact sum of the terms."""

    l_prior: float
    l_diff: float
    l_rec: float

    @property
    def total(self):
        return self.l_prior + self.l_diff + self.l_rec


def kl_initial(model, reparam, ctx, p_model=None, p_post=None):
    """Closed-form diagonal Gaussian KL( q(z_0|X) || p(z_0) ), summed over D."""
    mu_q, sig_q = reparam.mu_sigma(ctx, 0.0, p_post)
    mu_p, sig_p = model.init_mean_std(p_model)
    var_ratio = ad.square(ad.div(sig_q, sig_p))
    mean_term = ad.square(ad.div(ad.sub(mu_q, mu_p), sig_p))
    per_dim = ad.add(
        ad.sub(ad.log(sig_p), ad.log(sig_q)),
        ad.sub(ad.scale(ad.add(var_ratio, mean_term), 0.5), 0.5),
    )
    return ad.vsum(per_dim)


def residual(model, reparam, ctx, t, eps, p_model=None, p_post=None):
    """Whitened drift mismatch r = g^{-1} (h - f) at z_t = mu + sigma*eps."""
    f, z, g = posterior_sde_drift(model, reparam, ctx, t, eps, p_model, p_post)
    h = model.drift(z, t, p_model)
    return ad.div(ad.sub(h, f), g)


def diff_loss_sample(model, reparam, ctx, rng, p_model=None, p_post=None):
    """Single-draw estimate of the diffusion loss: t_max * (1/2)||r||^2."""
    t_max = reparam.t_max
    t = rng.uniform(0.0, t_max)
    eps = rng.standard_normal(model.d_latent)
    r = residual(model, reparam, ctx, t, eps, p_model, p_post)
    return ad.scale(ad.vsum(ad.square(r)), 0.5 * t_max)


def rec_loss_sample(model, reparam, ctx, X, rng, p_model=None, p_post=None):
    """Single-draw estimate of the reconstruction loss: N * (-log p(x_i|z_i))."""
    n = len(X)
    if n == 0:
        raise ValueError("empty observation series")
    i = int(rng.integers(n))
    eps = rng.standard_normal(model.d_latent)
    z = reparam.sample(ctx, X.ts[i], eps, p_post)
    ll = model.obs_loglik(X.xs[i], z, p_model)
    return ad.scale(ll, -float(n))


def objective_gradients(model, reparam, X, rng, n_mc=1):
    """Single-step objective and its gradients w.r.t. all parameters.

    Returns (LossBreakdown, grads keyed "m.*"/"q.*", bad, tape_nodes); grads
    is None when any term came out non-finite, in which case ``bad`` names
    the offending terms.
    """
    tape = ad.Tape()
    pm = tape.wrap(model.params, "m.")
    pq = tape.wrap(reparam.params, "q.")
    ctx = reparam.encode(X, pq)

    l_prior = kl_initial(model, reparam, ctx, pm, pq)
    diff_terms = [diff_loss_sample(model, reparam, ctx, rng, pm, pq) for _ in range(n_mc)]
    l_diff = ad.scale(sum(diff_terms[1:], diff_terms[0]), 1.0 / n_mc) if n_mc > 1 else diff_terms[0]
    rec_terms = [rec_loss_sample(model, reparam, ctx, X, rng, pm, pq) for _ in range(n_mc)]
    l_rec = ad.scale(sum(rec_terms[1:], rec_terms[0]), 1.0 / n_mc) if n_mc > 1 else rec_terms[0]
    total = ad.add(ad.add(l_prior, l_diff), l_rec)

    breakdown = LossBreakdown(float(ad.value(l_prior)), float(ad.value(l_diff)),
                              float(ad.value(l_rec)))
    if not np.isfinite(breakdown.total):
        bad = [name for name, v in [("prior", breakdown.l_prior),
                                    ("diff", breakdown.l_diff),
                                    ("rec", breakdown.l_rec)]
               if not np.isfinite(v)]
        return breakdown, None, ",".join(bad), len(tape)
    grads = ad.backward(total, tape)
    return breakdown, grads, None, len(tape)


def training_step(model, reparam, X, opt, rng, n_mc=1):
    """One joint gradient step on all model and posterior parameters.

    Deterministic given (parameters, X, rng state).  A non-finite loss aborts
    the step without touching parameters; the optimizer tracks the failure
    streak and halves the learning rate after five in a row.

    Returns (LossBreakdown, grad_norm, bad-term names or None).
    """
    breakdown, grads, bad, _ = objective_gradients(model, reparam, X, rng, n_mc=n_mc)
    if bad is not None:
        opt.note_failure()
        return breakdown, float("nan"), bad

    merged = {("m." + k): v for k, v in model.params.items()}
    merged.update({("q." + k): v for k, v in reparam.params.items()})
    opt.step(merged, grads)
    opt.note_success()
    for k in model.params:
        model.params[k] = merged["m." + k]
    for k in reparam.params:
        reparam.params[k] = merged["q." + k]
    grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    return breakdown, grad_norm, None


METRIC_FIELDS = ["step", "l_prior", "l_diff", "l_rec", "total",
                 "grad_norm_log10", "wall_ms"]


def train(model, reparam, dataset, iterations, lr=2e-4, seed=0, n_mc=4,
          metrics_path=None, max_failures=50, lr_decay="cosine"):
    """Run the matching training loop over a dataset of series.

    One series is drawn uniformly per step.  ``lr_decay`` is "cosine" (anneal
    to zero over the run, which pins the final iterate instead of leaving it
    wandering at gradient noise scale) or "none".  The default
    (lr 2e-4, 4-sample gradients, cosine decay, 5000 steps) is calibrated so
    a single-series run on the linear benchmark ends at the exact-inference
    likelihood level: with a fully trainable prior, longer or faster
    optimization legitimately pushes the bound past it by memorizing the one
    observed trajectory in the prior drift.  Returns the per-step history as
    a list of metric dicts; optionally streams them to a CSV file.
    """
    if lr_decay not in ("cosine", "none"):
        raise ValueError(f"unknown lr_decay {lr_decay!r}")
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    history = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    failures = 0
    try:
        for step_i in range(iterations):
            if lr_decay == "cosine" and iterations > 1:
                opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step_i / (iterations - 1)))
            idx = int(rng.integers(len(dataset.series)))
            t0 = time.perf_counter()
            breakdown, grad_norm, bad = training_step(
                model, reparam, dataset.series[idx], opt, rng, n_mc=n_mc)
            wall_ms = (time.perf_counter() - t0) * 1e3
            if bad is not None:
                failures += 1
                if failures > max_failures:
                    raise FloatingPointError(
                        f"training diverged: non-finite {bad} loss at step {step_i}")
            row = {
                "step": step_i,
                "l_prior": breakdown.l_prior,
                "l_diff": breakdown.l_diff,
                "l_rec": breakdown.l_rec,
                "total": breakdown.total,
                "grad_norm_log10": np.log10(grad_norm) if np.isfinite(grad_norm) and grad_norm > 0 else float("nan"),
                "wall_ms": wall_ms,
            }
            history.append(row)
            if writer is not None:
                writer.writerow(row)
    finally:
        if fh is not None:
            fh.close()
    return history


def nelbo_estimate(model, reparam, X, n_samples=1024, seed=0):
    """Multi-sample Monte Carlo estimate of the objective on one series.

    Uses the batched plain-numpy evaluation path (no gradients).  Returns
    (mean, standard_error, LossBreakdown of term means).
    """
    rng = np.random.default_rng(seed)
    ctx = reparam.encode(X)
    n = len(X)
    d = model.d_latent
    t_max = reparam.t_max

    l_prior = float(ad.value(kl_initial(model, reparam, ctx)))

    ts = rng.uniform(0.0, t_max, size=n_samples)
    eps = rng.standard_normal((n_samples, d))
    f, z, g = posterior_sde_drift(model, reparam, ctx, ts, eps)
    h = model.drift(z, ts)
    r = (h - f) / g
    diff_samples = 0.5 * t_max * np.sum(r * r, axis=-1)

    idx = rng.integers(n, size=n_samples)
    eps2 = rng.standard_normal((n_samples, d))
    z_obs = reparam.sample(ctx, X.ts[idx], eps2)
    ll = model.obs_loglik(X.xs[idx], z_obs)
    rec_samples = -float(n) * ll

    totals = l_prior + diff_samples + rec_samples
    mean = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / np.sqrt(n_samples))
    breakdown = LossBreakdown(l_prior, float(np.mean(diff_samples)),
                              float(np.mean(rec_samples)))
    return mean, se, breakdown


# ---------------------------------------------------------------------------
# diffusion-model correspondence
# ---------------------------------------------------------------------------

def schedule_diffusion_squared(alpha, dalpha, sigma, dsigma):
    """Squared diffusion consistent with Gaussian marginals N(alpha x, sigma^2).

    For the generative-time convention (data reconstructed as t -> 1), the
    conditional variance satisfies d(sigma^2)/dt = 2 f sigma^2 - g^2 with
    f = dalpha/alpha, so g^2 = 2 f sigma^2 - 2 sigma dsigma.
    """
    f = dalpha / alpha
    return 2.0 * f * sigma ** 2 - 2.0 * sigma * dsigma


def dsm_correspondence_check(alpha, dalpha, sigma, dsigma, score_fn, t, eps, x,
                             g=None):
    """Evaluate both integrands at a shared (t, eps, x); returns (lhs, rhs).

    The posterior marginal is fixed to N(alpha_t x, sigma_t^2 I) and the prior
    drift to f(t) z + g^2(t) s(z, t).  ``lhs`` is the matching integrand
    (1/2)||r||^2; ``rhs`` is the reweighted score-matching integrand
    (g^2/2)||s - grad log q(z_t|x)||^2.  With the schedule-consistent g the
    linear drift terms cancel and lhs == rhs exactly.
    """
    a, da = float(alpha(t)), float(dalpha(t))
    s, ds = float(sigma(t)), float(dsigma(t))
    f = da / a
    g2 = float(g(t)) ** 2 if g is not None else 2.0 * f * s * s - 2.0 * s * ds
    if g2 <= 0:
        raise ValueError(f"non-positive squared diffusion {g2} at t={t}")

    eps = np.asarray(eps, float)
    x = np.asarray(x, float)
    z = a * x + s * eps
    s_theta = np.asarray(score_fn(z, t), float)
    true_score = -eps / s

    prior_drift = f * z + g2 * s_theta
    f_bar = da * x + ds * eps
    post_drift = f_bar + 0.5 * g2 * true_score  # state-independent g: no divergence
    r = (prior_drift - post_drift) / np.sqrt(g2)
    lhs = 0.5 * float(np.sum(r * r))
    rhs = 0.5 * g2 * float(np.sum((s_theta - true_score) ** 2))
    return lhs, rhs
