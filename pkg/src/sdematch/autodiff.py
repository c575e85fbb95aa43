"""Minimal dense-array autodiff: reverse mode over a tape, forward mode in one
scalar direction.

Values are 64-bit numpy arrays of rank <= 2.  Reverse mode is define-by-run: a
``Tape`` records primitive ops in execution order (topological by construction)
and ``backward`` replays it once in reverse.  Forward mode is implemented with
``Dual`` pairs whose components may themselves be ``Var``s, so tangents remain
differentiable in reverse mode (needed when a time derivative appears inside a
training loss).

All primitive functions in this module dispatch on argument type: plain
numpy arrays fall through to numpy (fast batched evaluation), ``Var`` records
on the tape, ``Dual`` applies the forward-mode rule.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when primitive operands do not conform."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: non-conforming shapes {' and '.join(map(str, shapes))}")
        self.op = op
        self.shapes = shapes


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitive ops plus a registry of trainable leaves."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def leaf(self, name, value):
        """Register ``value`` as a named trainable leaf and return its Var."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        v = Var(_as_value(value), tape=self)
        v._leaf_name = name
        self._record(v)
        self.leaves[name] = v
        return v

    def wrap(self, params, prefix=""):
        """Register every array in a flat dict as a leaf; returns name -> Var."""
        return {k: self.leaf(prefix + k, v) for k, v in params.items()}

    def _record(self, var):
        var._idx = len(self.nodes)
        self.nodes.append(var)

    def __len__(self):
        return len(self.nodes)


class Var:
    """A value participating in reverse-mode differentiation."""

    __slots__ = ("value", "tape", "_parents", "_vjp", "_idx", "_leaf_name")
    __array_ufunc__ = None  # keep numpy from broadcasting over us

    def __init__(self, value, tape=None, parents=(), vjp=None):
        self.value = _as_value(value)
        self.tape = tape
        self._parents = parents
        self._vjp = vjp
        self._idx = None
        self._leaf_name = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.value!r})"

    # arithmetic operators delegate to the dispatching primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Dual:
    """Primal/tangent pair for forward-mode differentiation in one direction.

    Components are either numpy arrays or ``Var``s; the tangent always has the
    primal's shape.
    """

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent=None):
        if tangent is None:
            tangent = np.zeros(_shape_of(primal))
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.primal!r}, {self.tangent!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _shape_of(x):
    if isinstance(x, Var):
        return x.value.shape
    return np.shape(x)


def _raw(x):
    return x.value if isinstance(x, Var) else _as_value(x)


def _to_dual(x):
    if isinstance(x, Dual):
        return x
    return Dual(x, np.zeros(_shape_of(x)))


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var) and a.tape is not None:
            return a.tape
    return None


def _make(op, value, parents, vjp):
    """Record a primitive result; constant if no parent carries a tape."""
    value = _as_value(value)
    tape = _tape_of(*parents)
    # keep non-Var operands too: vjps return one gradient per operand in order
    out = Var(value, tape=tape, parents=tuple(parents), vjp=vjp)
    if tape is not None:
        tape._record(out)
    return out


def _unbroadcast(grad, shape):
    """Sum an adjoint down to the shape of the (possibly broadcast) operand."""
    grad = _as_value(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(op, np.shape(a), np.shape(b)) from None


# ---------------------------------------------------------------------------
# binary elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        da, db = _to_dual(a), _to_dual(b)
        return Dual(add(da.primal, db.primal), add(da.tangent, db.tangent))
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _raw(a), _raw(b)
        _check_broadcast("add", av, bv)
        sa, sb = av.shape, bv.shape

        def vjp(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return _make("add", av + bv, (a, b), vjp)
    _check_broadcast("add", a, b)
    return _as_value(a) + _as_value(b)


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        da, db = _to_dual(a), _to_dual(b)
        return Dual(sub(da.primal, db.primal), sub(da.tangent, db.tangent))
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _raw(a), _raw(b)
        _check_broadcast("sub", av, bv)
        sa, sb = av.shape, bv.shape

        def vjp(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

        return _make("sub", av - bv, (a, b), vjp)
    _check_broadcast("sub", a, b)
    return _as_value(a) - _as_value(b)


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        da, db = _to_dual(a), _to_dual(b)
        return Dual(
            mul(da.primal, db.primal),
            add(mul(da.tangent, db.primal), mul(da.primal, db.tangent)),
        )
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _raw(a), _raw(b)
        _check_broadcast("mul", av, bv)
        sa, sb = av.shape, bv.shape

        def vjp(g):
            return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

        return _make("mul", av * bv, (a, b), vjp)
    _check_broadcast("mul", a, b)
    return _as_value(a) * _as_value(b)


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        da, db = _to_dual(a), _to_dual(b)
        p = div(da.primal, db.primal)
        t = div(sub(da.tangent, mul(p, db.tangent)), db.primal)
        return Dual(p, t)
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _raw(a), _raw(b)
        _check_broadcast("div", av, bv)
        sa, sb = av.shape, bv.shape

        def vjp(g):
            return _unbroadcast(g / bv, sa), _unbroadcast(-g * av / (bv * bv), sb)

        return _make("div", av / bv, (a, b), vjp)
    _check_broadcast("div", a, b)
    return _as_value(a) / _as_value(b)


def scale(x, c):
    """Multiply by a constant python scalar."""
    c = float(c)
    if isinstance(x, Dual):
        return Dual(scale(x.primal, c), scale(x.tangent, c))
    if isinstance(x, Var):
        return _make("scale", x.value * c, (x,), lambda g: (g * c,))
    return _as_value(x) * c


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def _matmul_vjps(av, bv):
    def da(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return bv @ g
        if bv.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bv)
        return g @ bv.T

    def db(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return da, db


def matmul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        da, db = _to_dual(a), _to_dual(b)
        return Dual(
            matmul(da.primal, db.primal),
            add(matmul(da.tangent, db.primal), matmul(da.primal, db.tangent)),
        )
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _raw(a), _raw(b)
        if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
        da, db = _matmul_vjps(av, bv)

        def vjp(g):
            return da(g), db(g)

        return _make("matmul", av @ bv, (a, b), vjp)
    av, bv = _as_value(a), _as_value(b)
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return av @ bv


# ---------------------------------------------------------------------------
# unary primitives
# ---------------------------------------------------------------------------

def tanh(x):
    if isinstance(x, Dual):
        y = tanh(x.primal)
        return Dual(y, mul(sub(1.0, square(y)), x.tangent))
    if isinstance(x, Var):
        y = np.tanh(x.value)
        return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))
    return np.tanh(_as_value(x))


def sigmoid(x):
    """Logistic function via the numerically stable tanh identity."""
    return scale(add(tanh(scale(x, 0.5)), 1.0), 0.5)


def softplus(x):
    """log(1 + exp(x)) with an overflow-safe branch."""
    if isinstance(x, Dual):
        return Dual(softplus(x.primal), mul(sigmoid(x.primal), x.tangent))
    if isinstance(x, Var):
        y = np.logaddexp(0.0, x.value)
        s = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
        return _make("softplus", y, (x,), lambda g: (g * s,))
    return np.logaddexp(0.0, _as_value(x))


def exp(x):
    if isinstance(x, Dual):
        y = exp(x.primal)
        return Dual(y, mul(y, x.tangent))
    if isinstance(x, Var):
        y = np.exp(x.value)
        return _make("exp", y, (x,), lambda g: (g * y,))
    return np.exp(_as_value(x))


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.primal), div(x.tangent, x.primal))
    if isinstance(x, Var):
        v = x.value
        return _make("log", np.log(v), (x,), lambda g: (g / v,))
    return np.log(_as_value(x))


def square(x):
    if isinstance(x, Dual):
        return Dual(square(x.primal), mul(scale(x.primal, 2.0), x.tangent))
    if isinstance(x, Var):
        v = x.value
        return _make("square", v * v, (x,), lambda g: (g * 2.0 * v,))
    v = _as_value(x)
    return v * v


# ---------------------------------------------------------------------------
# reductions / structure
# ---------------------------------------------------------------------------

def vsum(x, axis=None):
    """Sum of all elements (``axis=None``) or along one axis."""
    if isinstance(x, Dual):
        return Dual(vsum(x.primal, axis), vsum(x.tangent, axis))
    if isinstance(x, Var):
        v = x.value
        y = v.sum(axis=axis)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, v.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(),)

        return _make("sum", y, (x,), vjp)
    return _as_value(x).sum(axis=axis)


def vmean(x, axis=None):
    if isinstance(x, (Dual, Var)):
        n = np.shape(_raw(x.primal if isinstance(x, Dual) else x))
        size = int(np.prod(n)) if axis is None else n[axis]
        return scale(vsum(x, axis), 1.0 / size)
    v = _as_value(x)
    return v.mean(axis=axis)


def concat(parts, axis=-1):
    """Concatenate arrays of equal rank along one axis."""
    if any(isinstance(p, Dual) for p in parts):
        duals = [_to_dual(p) for p in parts]
        return Dual(
            concat([d.primal for d in duals], axis),
            concat([d.tangent for d in duals], axis),
        )
    if any(isinstance(p, Var) for p in parts):
        vals = [_raw(p) for p in parts]
        ndims = {v.ndim for v in vals}
        if len(ndims) != 1:
            raise ShapeError("concat", *[v.shape for v in vals])
        ax = axis if axis >= 0 else vals[0].ndim + axis
        sizes = [v.shape[ax] for v in vals]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(
                np.take(g, range(offsets[i], offsets[i + 1]), axis=ax)
                for i in range(len(vals))
            )

        return _make("concat", np.concatenate(vals, axis=ax), parts, vjp)
    return np.concatenate([_as_value(p) for p in parts], axis=axis)


def take(x, start, stop):
    """Slice [start:stop] along the last axis."""
    if isinstance(x, Dual):
        return Dual(take(x.primal, start, stop), take(x.tangent, start, stop))
    if isinstance(x, Var):
        v = x.value
        y = v[..., start:stop]

        def vjp(g):
            out = np.zeros_like(v)
            out[..., start:stop] = g
            return (out,)

        return _make("slice", y, (x,), vjp)
    return _as_value(x)[..., start:stop]


def reshape(x, shape):
    if isinstance(x, Dual):
        return Dual(reshape(x.primal, shape), reshape(x.tangent, shape))
    if isinstance(x, Var):
        v = x.value
        return _make("reshape", v.reshape(shape), (x,), lambda g: (g.reshape(v.shape),))
    return _as_value(x).reshape(shape)


def value(x):
    """Plain numpy value of a Var/Dual/array (primal for duals)."""
    if isinstance(x, Dual):
        return value(x.primal)
    return _raw(x)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss, tape):
    """Gradients of a scalar loss w.r.t. every registered leaf.

    Leaves not reachable from the loss get zero arrays.  Each tape node is
    visited exactly once, in reverse recording order.
    """
    if not isinstance(loss, Var):
        raise TypeError("loss must be a Var")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    adjoints = {}
    if loss.tape is tape:
        adjoints[loss._idx] = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = adjoints.get(node._idx)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not isinstance(parent, Var) or parent.tape is not tape:
                continue
            acc = adjoints.get(parent._idx)
            adjoints[parent._idx] = pg if acc is None else acc + pg
    grads = {}
    for name, leaf in tape.leaves.items():
        g = adjoints.get(leaf._idx)
        grads[name] = np.zeros_like(leaf.value) if g is None else _as_value(g)
    return grads


def time_jvp(f, t, *args, **kwargs):
    """Evaluate ``f`` with ``t`` carrying unit tangent; returns a Dual.

    The primal is ``f(t, ...)`` and the tangent is df/dt, computed jointly in
    one forward pass.
    """
    seed = Dual(t, np.ones(_shape_of(t)))
    out = f(seed, *args, **kwargs)
    # a function that never touches t returns a constant: zero tangent
    return out if isinstance(out, Dual) else Dual(out)
