"""Model-side oracles: reparameterization map, score, drifts, likelihood,
checkpoints."""

import numpy as np
import pytest
import scipy.stats

from sdematch import autodiff as ad
from sdematch.datasets import TimeSeries, gen_linear
from sdematch.model import (
    LatentSDEModel,
    PosteriorReparam,
    conditional_ode_drift,
    load_checkpoint,
    posterior_sde_drift,
    posterior_sde_drift_parts,
    save_checkpoint,
)


def make_pair(d_latent=2, d_obs=1, seed=0, **kw):
    model = LatentSDEModel(d_latent=d_latent, d_obs=d_obs, hidden=16, seed=seed, **kw)
    rep = PosteriorReparam(d_obs=d_obs, d_latent=d_latent, context=8, hidden=16,
                           seed=seed + 1)
    return model, rep


def random_series(rng, n=6, d_obs=1):
    ts = np.sort(rng.uniform(0.05, 1.0, n))
    xs = rng.standard_normal((n, d_obs))
    return TimeSeries(ts, xs)


class FrozenReparam:
    """Closed-form mu/sigma stand-in for the trivial drift examples."""

    def __init__(self, mu, mu_dot, sigma, sigma_dot, d=1):
        self._fns = (mu, mu_dot, sigma, sigma_dot)
        self.d_latent = d

    def mu_sigma(self, ctx, t, p=None):
        mu, _, sigma, _ = self._fns
        return mu(t), sigma(t)

    def mu_sigma_dual(self, ctx, t, p=None):
        mu, mu_dot, sigma, sigma_dot = self._fns
        return mu(t), mu_dot(t), sigma(t), sigma_dot(t)


# ---------------------------------------------------------------------------
# reparameterization map
# ---------------------------------------------------------------------------

def test_zero_noise_returns_mean():
    model, rep = make_pair()
    X = random_series(np.random.default_rng(0))
    ctx = rep.encode(X)
    mu, _ = rep.mu_sigma(ctx, 0.4)
    z = rep.sample(ctx, 0.4, np.zeros(2))
    assert np.array_equal(z, mu)


def test_sample_mean_monte_carlo():
    model, rep = make_pair()
    X = random_series(np.random.default_rng(1))
    ctx = rep.encode(X)
    mu, sigma = rep.mu_sigma(ctx, 0.6)
    eps = np.random.default_rng(2).standard_normal((100_000, 2))
    zs = rep.sample(ctx, np.full(100_000, 0.6), eps)
    err = np.abs(zs.mean(axis=0) - mu)
    assert np.all(err <= 4.0 * sigma / np.sqrt(100_000))


def test_roundtrip_inverse():
    rng = np.random.default_rng(3)
    model, rep = make_pair()
    for _ in range(10):
        X = random_series(rng)
        ctx = rep.encode(X)
        t = rng.uniform(0, 1, 100)
        eps = rng.standard_normal((100, 2))
        z = rep.sample(ctx, t, eps)
        back = rep.inverse(ctx, t, z)
        assert np.max(np.abs(back - eps)) <= 1e-10


def test_time_domain_enforced():
    model, rep = make_pair()
    X = random_series(np.random.default_rng(4))
    ctx = rep.encode(X)
    with pytest.raises(ValueError):
        rep.mu_sigma(ctx, 1.5)
    with pytest.raises(ValueError):
        rep.mu_sigma(ctx, -0.2)


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def test_score_identity_scale():
    class S:
        def mu_sigma(self, ctx, t, p=None):
            return np.zeros(2), np.ones(2)
    s = PosteriorReparam.score_from_eps(S(), None, 0.0, np.array([0.5, -1.0]))
    assert np.allclose(s, [-0.5, 1.0], atol=1e-15)


def test_score_diagonal_scale():
    class S:
        def mu_sigma(self, ctx, t, p=None):
            return np.zeros(2), np.array([2.0, 4.0])
    s = PosteriorReparam.score_from_eps(S(), None, 0.0, np.array([1.0, 1.0]))
    assert np.allclose(s, [-0.5, -0.25], atol=1e-15)


def test_score_matches_gaussian_log_density_gradient():
    """Closed-form Gaussian oracle: grad log N(z; mu, diag sigma^2) = -(z-mu)/sigma^2."""
    model, rep = make_pair()
    rng = np.random.default_rng(5)
    X = random_series(rng)
    ctx = rep.encode(X)
    for _ in range(20):
        t = float(rng.uniform(0, 1))
        eps = rng.standard_normal(2)
        mu, sigma = rep.mu_sigma(ctx, t)
        z = mu + sigma * eps
        oracle = -(z - mu) / sigma ** 2
        got = rep.score_from_eps(ctx, t, eps)
        assert np.max(np.abs(got - oracle) / np.maximum(np.abs(oracle), 1e-12)) <= 1e-10

        # and against central finite differences of the explicit log density
        def logq(zv):
            return float(np.sum(-np.log(sigma) - 0.5 * ((zv - mu) / sigma) ** 2
                                - 0.5 * np.log(2 * np.pi)))
        fd = np.array([
            (logq(z + 1e-6 * e) - logq(z - 1e-6 * e)) / 2e-6
            for e in np.eye(2)
        ])
        assert np.max(np.abs(got - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))


# ---------------------------------------------------------------------------
# conditional ODE drift
# ---------------------------------------------------------------------------

def test_ode_drift_mean_translation():
    """mu(t) = t * 1, sigma = 1 frozen: drift is 1 for every state."""
    rep = FrozenReparam(
        mu=lambda t: np.full(2, float(ad.value(t))),
        mu_dot=lambda t: np.ones(2),
        sigma=lambda t: np.ones(2),
        sigma_dot=lambda t: np.zeros(2), d=2)
    for z in [np.zeros(2), np.array([3.0, -1.0])]:
        f = conditional_ode_drift(rep, None, 0.3, z)
        assert np.allclose(f, 1.0, atol=1e-14)


def test_ode_drift_exponential_scale():
    """mu = 0, sigma = e^t: drift equals the state itself."""
    rep = FrozenReparam(
        mu=lambda t: np.zeros(1),
        mu_dot=lambda t: np.zeros(1),
        sigma=lambda t: np.array([np.exp(float(ad.value(t)))]),
        sigma_dot=lambda t: np.array([np.exp(float(ad.value(t)))]))
    for z in [np.array([0.7]), np.array([-2.0])]:
        f = conditional_ode_drift(rep, None, 0.5, z)
        assert np.allclose(f, z, atol=1e-12)


def _rk4(f, z0, t0, t1, n):
    z, t = np.array(z0, float), t0
    h = (t1 - t0) / n
    for _ in range(n):
        k1 = f(t, z)
        k2 = f(t + h / 2, z + h / 2 * k1)
        k3 = f(t + h / 2, z + h / 2 * k2)
        k4 = f(t + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return z


def test_ode_drift_transports_the_map():
    """Integrating the marginal-generating ODE from F(eps, 0) lands on
    F(eps, 1) — the flow reproduces the map along fixed noise."""
    rng = np.random.default_rng(6)
    model, rep = make_pair()
    X = random_series(rng)
    ctx = rep.encode(X)

    # integrate per context segment so the kinks at observation times never
    # sit inside an RK4 step; nudge endpoint stages off the knots, where the
    # drift only has one-sided derivatives
    knots = np.unique(np.concatenate([[0.0, 1.0], X.ts[(X.ts > 0) & (X.ts < 1)]]))
    for _ in range(10):
        eps = rng.standard_normal(2)
        z = rep.sample(ctx, 0.0, eps)
        for a, b in zip(knots[:-1], knots[1:]):
            def field(t, z, lo=a, hi=b):
                t = min(max(t, lo + 1e-9), hi - 1e-9)
                return conditional_ode_drift(rep, ctx, t, z)
            steps = max(int(np.ceil((b - a) * 1000)), 2)
            z = _rk4(field, z, a, b, steps)
        target = rep.sample(ctx, 1.0, eps)
        rel = np.max(np.abs(z - target) / np.maximum(np.abs(target), 1e-8))
        assert rel <= 1e-4


def test_ode_drift_rejects_non_finite():
    rep = FrozenReparam(
        mu=lambda t: np.zeros(1), mu_dot=lambda t: np.array([np.inf]),
        sigma=lambda t: np.ones(1), sigma_dot=lambda t: np.zeros(1))
    with pytest.raises(FloatingPointError):
        conditional_ode_drift(rep, None, 0.1, np.array([0.0]))


# ---------------------------------------------------------------------------
# posterior SDE drift
# ---------------------------------------------------------------------------

def test_posterior_drift_constant_g_shrinkage():
    """mu = 0, sigma = 1 frozen, g = c: drift is -c^2 z / 2."""
    c = 0.8
    z = np.array([1.5, -0.4])
    f = posterior_sde_drift_parts(
        mu_dot=np.zeros(2), sigma=np.ones(2), sigma_dot=np.zeros(2),
        eps=z, g=np.full(2, c), div_g2=np.zeros(2))
    assert np.allclose(f, -0.5 * c * c * z, atol=1e-14)


def test_posterior_drift_divergence_contribution():
    """g(z) = z at z = 2: the divergence term contributes d(z^2)/dz / 2 = 2."""
    base = posterior_sde_drift_parts(
        mu_dot=np.zeros(1), sigma=np.ones(1), sigma_dot=np.zeros(1),
        eps=np.array([2.0]), g=np.array([2.0]), div_g2=np.zeros(1))
    with_div = posterior_sde_drift_parts(
        mu_dot=np.zeros(1), sigma=np.ones(1), sigma_dot=np.zeros(1),
        eps=np.array([2.0]), g=np.array([2.0]), div_g2=np.array([2 * 2.0]))
    assert with_div[0] - base[0] == pytest.approx(2.0, abs=1e-14)


def test_state_independent_g_has_zero_divergence():
    model, rep = make_pair(state_dependent_g=False)
    z = np.random.default_rng(7).standard_normal((5, 2))
    t = np.linspace(0.1, 0.9, 5)
    _, div = model.diffusion_with_div(z, t)
    assert np.all(div == 0.0)


def test_posterior_drift_full_composition_consistency():
    """posterior_sde_drift must equal drift_parts on its own pieces."""
    model, rep = make_pair(seed=8)
    rng = np.random.default_rng(8)
    X = random_series(rng)
    ctx = rep.encode(X)
    t, eps = 0.45, rng.standard_normal(2)
    f, z, g = posterior_sde_drift(model, rep, ctx, t, eps)
    mu, mu_dot, sigma, sigma_dot = rep.mu_sigma_dual(ctx, t)
    assert np.allclose(z, mu + sigma * eps, atol=1e-15)
    g2, div = model.diffusion_with_div(z, t)
    assert np.array_equal(g, g2)
    expected = posterior_sde_drift_parts(mu_dot, sigma, sigma_dot, eps, g, div)
    assert np.allclose(f, expected, atol=1e-15)


# ---------------------------------------------------------------------------
# prior dynamics
# ---------------------------------------------------------------------------

def test_fresh_diffusion_is_constant():
    model, _ = make_pair(seed=9)
    rng = np.random.default_rng(9)
    expected = np.log1p(np.e ** 0) * 0 + np.log(2.0)  # softplus(0) = log 2
    for _ in range(5):
        g = model.diffusion(rng.standard_normal(2), float(rng.uniform(0, 1)))
        assert np.allclose(g, expected + model.g_min, atol=1e-15)


def test_diffusion_floor():
    model, _ = make_pair(seed=10)
    rng = np.random.default_rng(10)
    z = rng.standard_normal((50, 2))
    g = model.diffusion(z, rng.uniform(0, 1, 50))
    assert np.all(g >= model.g_min)


def test_diffusion_coordinatewise_structure():
    """g_kk depends only on z_k: perturbing z_j (j != k) leaves it bitwise equal."""
    model, _ = make_pair(seed=11)
    # give the g-net nonzero weights so the test is not vacuous
    rng = np.random.default_rng(11)
    for k, v in model.params.items():
        if k.startswith("g"):
            model.params[k] = v + 0.1 * rng.standard_normal(np.shape(v))
    z = np.array([0.3, -0.7])
    g = model.diffusion(z, 0.5)
    z2 = z.copy()
    z2[1] += 10.0
    g2 = model.diffusion(z2, 0.5)
    assert g[0] == g2[0]
    assert g[1] != g2[1]


def test_prior_drift_param_gradients_finite_difference():
    model, _ = make_pair(seed=12)
    z, t = np.array([0.2, -0.5]), 0.3
    tape = ad.Tape()
    p = tape.wrap(model.params, "m.")
    out = model.drift(z, t, p)
    loss = ad.vsum(ad.square(out))
    grads = ad.backward(loss, tape)

    def loss_at(name, delta):
        saved = model.params[name]
        model.params[name] = saved + delta
        val = float(np.sum(np.asarray(model.drift(z, t)) ** 2))
        model.params[name] = saved
        return val

    rng = np.random.default_rng(12)
    for name in ["h.w0", "h.b2"]:
        g = grads["m." + name]
        direction = rng.standard_normal(np.shape(model.params[name]))
        h = 1e-6
        fd = (loss_at(name, h * direction) - loss_at(name, -h * direction)) / (2 * h)
        analytic = float(np.sum(g * direction))
        assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(analytic))


# ---------------------------------------------------------------------------
# observation likelihood
# ---------------------------------------------------------------------------

def test_obs_loglik_at_mode():
    model, _ = make_pair(d_obs=3, seed=13)
    model.params["logr"] = np.zeros(3)
    z = np.array([0.1, -0.2])
    x = model.decode(z)
    assert model.obs_loglik(x, z) == pytest.approx(-1.5 * np.log(2 * np.pi), abs=1e-12)


def test_obs_loglik_r_doubling():
    model, _ = make_pair(d_obs=3, seed=14)
    z = np.array([0.1, -0.2])
    x = model.decode(z)
    base = model.obs_loglik(x, z)
    model.params["logr"] = model.params["logr"] + np.log(2.0)
    assert model.obs_loglik(x, z) == pytest.approx(base - 3 * np.log(2.0), abs=1e-12)


def test_obs_loglik_vs_scipy():
    model, _ = make_pair(d_obs=2, seed=15)
    rng = np.random.default_rng(15)
    model.params["logr"] = np.array([-0.3, 0.4])
    for _ in range(10):
        z = rng.standard_normal(2)
        x = rng.standard_normal(2)
        mean = np.asarray(model.decode(z))
        cov = np.diag(np.exp(2 * model.params["logr"]))
        oracle = scipy.stats.multivariate_normal(mean, cov).logpdf(x)
        got = float(model.obs_loglik(x, z))
        assert abs(got - oracle) / max(abs(oracle), 1e-12) <= 1e-12


def test_obs_loglik_shape_check():
    model, _ = make_pair(d_obs=2, seed=16)
    with pytest.raises(ad.ShapeError):
        model.obs_loglik(np.zeros(3), np.zeros(2))


def test_initial_prior_sampling_moments():
    model, _ = make_pair(seed=17)
    model.params["mu0"] = np.array([1.0, -2.0])
    model.params["logsig0"] = np.log(np.array([0.5, 2.0]))
    zs = model.sample_z0(np.random.default_rng(17), 200_000)
    assert np.allclose(zs.mean(axis=0), [1.0, -2.0], atol=0.02)
    assert np.allclose(zs.std(axis=0), [0.5, 2.0], atol=0.02)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_bitwise_roundtrip(tmp_path):
    model, rep = make_pair(seed=18)
    # train-like perturbation so values are not at init
    rng = np.random.default_rng(18)
    for k in model.params:
        model.params[k] = model.params[k] + 1e-3 * rng.standard_normal(np.shape(model.params[k]))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, model, rep, extra={"note": "test"})
    m2, r2, extra = load_checkpoint(path)
    assert extra == {"note": "test"}
    assert type(r2).__name__ == "PosteriorReparam"
    for k in model.params:
        assert np.array_equal(model.params[k], m2.params[k])
    for k in rep.params:
        assert np.array_equal(rep.params[k], r2.params[k])
    assert m2.config() == model.config()
    assert r2.config() == rep.config()


def test_checkpoint_load_evaluates_identically(tmp_path):
    model, rep = make_pair(seed=19)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, model, rep)
    m2, r2, _ = load_checkpoint(path)
    X = random_series(np.random.default_rng(19))
    ctx1, ctx2 = rep.encode(X), r2.encode(X)
    mu1, s1 = rep.mu_sigma(ctx1, 0.5)
    mu2, s2 = r2.mu_sigma(ctx2, 0.5)
    assert np.array_equal(mu1, mu2) and np.array_equal(s1, s2)
