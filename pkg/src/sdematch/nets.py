"""Small multilayer perceptrons and a gated recurrent cell.

Parameters live in flat ``name -> ndarray`` dicts so a training step can
register them all as tape leaves at once.  Apply functions are written against
the dispatching primitives in :mod:`sdematch.autodiff`, so the same code runs
on plain arrays (fast batched evaluation), ``Var``s (training) and ``Dual``s
(forward-mode time/state derivatives).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_mlp(rng, sizes, prefix, zero_final=False):
    """Xavier-style init of a tanh MLP; optional zero final layer."""
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_final:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = np.zeros(n_out)
    return params


def mlp_apply(params, prefix, x):
    """tanh hidden layers, linear output.  ``x`` rank 1 or rank 2 (batch)."""
    n_layers = 0
    while f"{prefix}.w{n_layers}" in params:
        n_layers += 1
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def init_gru(rng, d_in, d_hidden, prefix):
    """Standard GRU cell parameters."""
    params = {}
    s_in = np.sqrt(1.0 / d_in)
    s_h = np.sqrt(1.0 / d_hidden)
    for gate in ("r", "u", "c"):
        params[f"{prefix}.w{gate}"] = rng.normal(0.0, s_in, size=(d_in, d_hidden))
        params[f"{prefix}.u{gate}"] = rng.normal(0.0, s_h, size=(d_hidden, d_hidden))
        params[f"{prefix}.b{gate}"] = np.zeros(d_hidden)
    return params


def gru_step(params, prefix, h, x):
    """One GRU update ``h' = u*h + (1-u)*c``."""
    r = ad.sigmoid(
        ad.add(
            ad.add(ad.matmul(x, params[f"{prefix}.wr"]), ad.matmul(h, params[f"{prefix}.ur"])),
            params[f"{prefix}.br"],
        )
    )
    u = ad.sigmoid(
        ad.add(
            ad.add(ad.matmul(x, params[f"{prefix}.wu"]), ad.matmul(h, params[f"{prefix}.uu"])),
            params[f"{prefix}.bu"],
        )
    )
    c = ad.tanh(
        ad.add(
            ad.add(
                ad.matmul(x, params[f"{prefix}.wc"]),
                ad.matmul(ad.mul(r, h), params[f"{prefix}.uc"]),
            ),
            params[f"{prefix}.bc"],
        )
    )
    return ad.add(ad.mul(u, h), ad.mul(ad.sub(1.0, u), c))
