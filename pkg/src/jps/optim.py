"""SGD and Adam restricted to a set of tunable coordinates.

``tunable`` maps a parameter id to either ``None`` (whole tensor trainable) or
a sorted array of flat offsets. Parameters absent from the map are never
touched, and Adam allocates moments only for the listed coordinates.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


class _Masked:
    def __init__(self, lr: float, tunable: dict | None = None):
        if lr <= 0:
            raise ValidationError("learning rate must be positive")
        self.lr = lr
        self.tunable = tunable

    def _targets(self, params: dict):
        if self.tunable is None:
            return [(pid, None) for pid in params]
        return list(self.tunable.items())

    @staticmethod
    def _check(pid, idx, params):
        if pid not in params:
            raise ValidationError(f"mask refers to unknown parameter {pid!r}")
        if idx is not None and idx.size and (idx[0] < 0 or idx[-1] >= params[pid].size):
            raise ValidationError(f"mask offsets out of range for {pid!r}")


class SGD(_Masked):
    def step(self, params: dict, grads: dict) -> None:
        for pid, idx in self._targets(params):
            self._check(pid, idx, params)
            if idx is None:
                params[pid] -= self.lr * grads[pid]
            else:
                flat = params[pid].reshape(-1)
                flat[idx] -= self.lr * grads[pid].reshape(-1)[idx]

    def state_dict(self):
        return {}


class Adam(_Masked):
    def __init__(self, lr: float, tunable: dict | None = None, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(lr, tunable)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for pid, idx in self._targets(params):
            self._check(pid, idx, params)
            g = grads[pid].reshape(-1)
            if idx is not None:
                g = g[idx]
            if pid not in self.m:
                self.m[pid] = np.zeros_like(g)
                self.v[pid] = np.zeros_like(g)
            m, v = self.m[pid], self.v[pid]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            upd = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            flat = params[pid].reshape(-1)
            if idx is None:
                flat -= upd
            else:
                flat[idx] -= upd

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def make_optimizer(kind: str, lr: float, tunable: dict | None):
    if kind == "sgd":
        return SGD(lr, tunable)
    if kind == "adam":
        return Adam(lr, tunable)
    raise ValidationError(f"unknown optimizer {kind!r}")
