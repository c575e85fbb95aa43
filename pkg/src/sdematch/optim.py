"""Adam optimizer over flat parameter dicts."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adaptive-moment optimizer; state keyed by parameter name."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        # separate multiplier so schedules can overwrite ``lr`` each step
        # without erasing the failure-policy halving
        self.lr_mult = 1.0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}
        self.fail_streak = 0

    def step(self, params, grads):
        """One in-place update; parameters without gradients are untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if k not in params:
                continue
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k] = m
            self.v[k] = v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            step_size = self.lr * self.lr_mult
            params[k] = params[k] - step_size * m_hat / (np.sqrt(v_hat) + self.eps)

    def note_failure(self):
        """Non-finite-loss policy: halve lr after 5 consecutive failed steps."""
        self.fail_streak += 1
        if self.fail_streak >= 5:
            self.lr_mult /= 2.0
            self.fail_streak = 0

    def note_success(self):
        self.fail_streak = 0
