"""Reverse- and forward-mode engine tests.

Oracles: central finite differences (step 1e-5) for every primitive and for
composed networks; hand-computed derivatives for the trivial cases.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdematch import autodiff as ad
from sdematch import nets

FD_STEP = 1e-5


def fd_grad(f, x, step=FD_STEP):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def grad_of(op, *arrays, wrt=0):
    """Reverse-mode gradient of sum(op(...)) w.r.t. one operand."""
    tape = ad.Tape()
    leaves = [tape.leaf(f"x{i}", a) for i, a in enumerate(arrays)]
    out = op(*leaves)
    loss = ad.vsum(out) if np.ndim(ad.value(out)) else out
    grads = ad.backward(loss, tape)
    return grads[f"x{wrt}"]


# ---------------------------------------------------------------------------
# trivial hand-derived cases
# ---------------------------------------------------------------------------

def test_square_scalar():
    tape = ad.Tape()
    x = tape.leaf("x", 3.0)
    y = ad.square(x)
    assert float(ad.value(y)) == 9.0
    assert float(ad.backward(y, tape)["x"]) == 6.0


def test_tanh_zero():
    tape = ad.Tape()
    x = tape.leaf("x", 0.0)
    y = ad.tanh(x)
    assert float(ad.value(y)) == 0.0
    assert float(ad.backward(y, tape)["x"]) == 1.0


def test_product_rule():
    tape = ad.Tape()
    x = tape.leaf("x", 2.0)
    y = tape.leaf("y", 5.0)
    grads = ad.backward(ad.mul(x, y), tape)
    assert float(grads["x"]) == 5.0
    assert float(grads["y"]) == 2.0


def test_constant_loss_zero_grads():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(4))
    _ = ad.square(x)  # on the tape but unused by the loss
    loss = tape.leaf("c", 7.0)
    grads = ad.backward(loss, tape)
    assert np.all(grads["x"] == 0.0)
    assert grads["x"].shape == (4,)


def test_unreachable_leaf_gets_zeros():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(3))
    y = tape.leaf("y", np.full((2, 2), 2.0))
    loss = ad.vsum(ad.square(x))
    grads = ad.backward(loss, tape)
    assert grads["y"].shape == (2, 2)
    assert np.all(grads["y"] == 0.0)


def test_gradient_accumulation_additive():
    # z = x*x + x  ->  dz/dx = 2x + 1
    tape = ad.Tape()
    x = tape.leaf("x", 3.0)
    loss = ad.add(ad.mul(x, x), x)
    assert float(ad.backward(loss, tape)["x"]) == 7.0


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.square(x), tape)


def test_duplicate_leaf_name_rejected():
    tape = ad.Tape()
    tape.leaf("x", 1.0)
    with pytest.raises(ValueError):
        tape.leaf("x", 2.0)


# ---------------------------------------------------------------------------
# finite-difference suite over the primitive set
# ---------------------------------------------------------------------------

UNARY_OPS = [
    (ad.tanh, lambda r, s: r.standard_normal(s)),
    (ad.sigmoid, lambda r, s: r.standard_normal(s)),
    (ad.softplus, lambda r, s: r.standard_normal(s)),
    (ad.exp, lambda r, s: r.standard_normal(s)),
    (ad.log, lambda r, s: r.uniform(0.5, 3.0, s)),
    (ad.square, lambda r, s: r.standard_normal(s)),
    (lambda x: ad.scale(x, -1.7), lambda r, s: r.standard_normal(s)),
    (ad.vsum, lambda r, s: r.standard_normal(s)),
    (ad.vmean, lambda r, s: r.standard_normal(s)),
]

BINARY_OPS = [ad.add, ad.sub, ad.mul, ad.div]


@pytest.mark.parametrize("op,sampler", UNARY_OPS)
def test_unary_fd(op, sampler):
    rng = np.random.default_rng(0)
    for trial in range(100):
        shape = (int(rng.integers(1, 6)),)
        x = sampler(rng, shape)
        an = grad_of(op, x)
        fd = fd_grad(lambda v: float(np.sum(ad.value(op(v)))), x)
        assert rel_err(an, fd) <= 1e-4


@pytest.mark.parametrize("op", BINARY_OPS)
def test_binary_fd(op):
    rng = np.random.default_rng(1)
    for trial in range(100):
        shape = (int(rng.integers(1, 6)),)
        a = rng.standard_normal(shape)
        b = rng.uniform(0.5, 2.0, shape) * np.sign(rng.standard_normal(shape))
        for wrt, var in [(0, a), (1, b)]:
            an = grad_of(op, a, b, wrt=wrt)
            if wrt == 0:
                fd = fd_grad(lambda v: float(np.sum(ad.value(op(v, b)))), a)
            else:
                fd = fd_grad(lambda v: float(np.sum(ad.value(op(a, v)))), b)
            assert rel_err(an, fd) <= 1e-4


def test_binary_broadcast_scalar_operand():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(5)
    for op in BINARY_OPS:
        an = grad_of(op, a, np.array(1.3), wrt=1)
        fd = fd_grad(lambda v: float(np.sum(ad.value(op(a, v)))), np.array(1.3))
        assert rel_err(an, fd) <= 1e-4


def test_matmul_fd_tight():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    for wrt in (0, 1):
        an = grad_of(ad.matmul, a, b, wrt=wrt)
        if wrt == 0:
            fd = fd_grad(lambda v: float(np.sum(v @ b)), a)
        else:
            fd = fd_grad(lambda v: float(np.sum(a @ v)), b)
        assert rel_err(an, fd) <= 1e-6


def test_matmul_vector_cases_fd():
    rng = np.random.default_rng(4)
    v = rng.standard_normal(4)
    m = rng.standard_normal((4, 3))
    w = rng.standard_normal(4)
    # vector @ matrix
    an = grad_of(ad.matmul, v, m, wrt=0)
    fd = fd_grad(lambda x: float(np.sum(x @ m)), v)
    assert rel_err(an, fd) <= 1e-5
    # matrix @ vector
    an = grad_of(ad.matmul, m.T, v, wrt=1)
    fd = fd_grad(lambda x: float(np.sum(m.T @ x)), v)
    assert rel_err(an, fd) <= 1e-5
    # inner product
    an = grad_of(ad.matmul, v, w, wrt=0)
    assert rel_err(an, w) <= 1e-12


def test_concat_slice_reshape_fd():
    rng = np.random.default_rng(5)
    a = rng.standard_normal(3)
    b = rng.standard_normal(2)

    def f(x):
        joined = ad.concat([x, b])
        return ad.vsum(ad.square(ad.take(joined, 1, 4)))

    an = grad_of(f, a)
    fd = fd_grad(lambda v: float(ad.value(f(v))), a)
    assert rel_err(an, fd) <= 1e-4

    def g(x):
        return ad.vsum(ad.square(ad.reshape(x, (6,))))

    m = rng.standard_normal((2, 3))
    an = grad_of(g, m)
    fd = fd_grad(lambda v: float(ad.value(g(v))), m)
    assert rel_err(an, fd) <= 1e-4


def test_mlp_fd():
    """2-layer tanh MLP loss vs finite differences, rel-err <= 1e-4."""
    rng = np.random.default_rng(6)
    params = nets.init_mlp(rng, [3, 8, 8, 2], "net")
    x = rng.standard_normal(3)

    def loss_with(p):
        tape = ad.Tape()
        leaves = tape.wrap(p)
        out = nets.mlp_apply(leaves, "net", x)
        return ad.vsum(ad.square(out)), tape, leaves

    loss, tape, _ = loss_with(params)
    grads = ad.backward(loss, tape)
    for key in params:
        fd = fd_grad(
            lambda v, k=key: float(ad.value(loss_with({**params, k: v})[0])),
            params[key],
        )
        assert rel_err(grads[key], fd) <= 1e-4, key


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------

def test_time_jvp_square():
    out = ad.time_jvp(lambda t: ad.mul(t, t), 3.0)
    assert float(ad.value(out.primal)) == 9.0
    assert float(ad.value(out.tangent)) == 6.0


def test_time_jvp_constant():
    c = np.array([1.0, 2.0])
    out = ad.time_jvp(lambda t: ad.add(ad.mul(c, 0.0), c), 0.5)
    assert np.all(ad.value(out.tangent) == 0.0)


def test_dual_constant_tangent_zero():
    d = ad.Dual(np.ones((2, 3)))
    assert d.tangent.shape == (2, 3)
    assert np.all(d.tangent == 0.0)


def test_time_jvp_mlp_fd():
    """Tangent of t -> MLP(t) matches central finite differences, <= 1e-5."""
    rng = np.random.default_rng(7)
    params = nets.init_mlp(rng, [1, 8, 8, 1], "net")

    def f(t):
        return nets.mlp_apply(params, "net", ad.reshape(t, (1,)))

    for t0 in [-1.0, 0.0, 0.3, 2.0]:
        out = ad.time_jvp(f, t0)
        h = FD_STEP
        fd = (ad.value(f(np.float64(t0 + h))) - ad.value(f(np.float64(t0 - h)))) / (2 * h)
        assert rel_err(ad.value(out.tangent), fd) <= 1e-5


def test_forward_mode_composed_ops_fd():
    rng = np.random.default_rng(8)
    a = rng.standard_normal(4)

    def f(t):
        u = ad.mul(a, t)
        return ad.vsum(ad.add(ad.tanh(u), ad.softplus(ad.scale(u, 0.5))))

    t0 = 0.7
    out = ad.time_jvp(f, t0)
    fd = (float(ad.value(f(t0 + FD_STEP))) - float(ad.value(f(t0 - FD_STEP)))) / (2 * FD_STEP)
    assert rel_err(ad.value(out.tangent), fd) <= 1e-4


def test_forward_over_reverse():
    """Dual tangents built from Vars stay differentiable in reverse mode."""
    tape = ad.Tape()
    w = tape.leaf("w", 2.0)
    # F(t) = w * t^2 ; dF/dt = 2 w t ; d(dF/dt)/dw = 2 t
    t0 = 3.0
    t = ad.Dual(t0, 1.0)
    out = ad.mul(w, ad.mul(t, t))
    grads = ad.backward(out.tangent, tape)
    assert float(grads["w"]) == pytest.approx(2 * t0, abs=1e-12)


# ---------------------------------------------------------------------------
# shape errors and determinism
# ---------------------------------------------------------------------------

def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value)


def test_add_shape_mismatch():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.add(x, np.ones(4))


def test_concat_rank_mismatch():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.concat([x, np.ones((2, 2))])


def test_gradient_determinism_bitwise():
    rng = np.random.default_rng(9)
    params = nets.init_mlp(rng, [4, 16, 16, 1], "net")
    x = rng.standard_normal(4)

    def grads_once():
        tape = ad.Tape()
        leaves = tape.wrap(params)
        out = nets.mlp_apply(leaves, "net", x)
        return ad.backward(ad.vsum(out), tape)

    g1, g2 = grads_once(), grads_once()
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_softplus_overflow_safe_and_positive(vals):
    x = np.asarray(vals)
    y = ad.softplus(x)
    assert np.all(np.isfinite(y))
    assert np.all(y >= 0)
    # softplus(x) >= x and softplus(x) >= 0
    assert np.all(y >= x - 1e-12)


def test_softplus_extreme_inputs():
    assert np.isfinite(ad.softplus(np.array([800.0])))[0]
    assert ad.softplus(np.array([800.0]))[0] == pytest.approx(800.0)
    assert ad.softplus(np.array([-800.0]))[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_mul_grad_matches_operands(x, y):
    tape = ad.Tape()
    a = tape.leaf("a", x)
    b = tape.leaf("b", y)
    grads = ad.backward(ad.mul(a, b), tape)
    assert float(grads["a"]) == pytest.approx(y, abs=1e-12)
    assert float(grads["b"]) == pytest.approx(x, abs=1e-12)
