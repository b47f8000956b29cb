"""Plain SGD and Adam over name -> array mappings."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .errors import ContractViolation, InputError


def _check(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
    if not lr >= 0:
        raise InputError(f"learning rate must be non-negative, got {lr}")
    for k, g in grads.items():
        if k not in params:
            raise ContractViolation(f"gradient for unknown tensor {k!r}")
        if params[k].shape != np.shape(g):
            raise ContractViolation(f"shape mismatch for {k!r}: {params[k].shape} vs {np.shape(g)}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
             ) -> dict[str, np.ndarray]:
    """``p - lr * g`` for every tensor that has a gradient; others pass through."""
    _check(params, grads, lr)
    return {k: (p - lr * grads[k]) if k in grads else p for k, p in params.items()}


class Adam:
    """Adam with bias correction; state is keyed by tensor name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
             ) -> dict[str, np.ndarray]:
        _check(params, grads, lr)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = dict(params)
        for k, g in grads.items():
            m = self.m.get(k)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = self.v.get(k)
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            p = params[k]
            if self.weight_decay and lr:
                p = p * (1.0 - lr * self.weight_decay)
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def make_optimizer(name: str, weight_decay: float = 0.0):
    """``"sgd"`` returns None (use :func:`sgd_step`); ``"adam"`` returns a fresh :class:`Adam`."""
    if name == "sgd":
        return None
    if name == "adam":
        return Adam(weight_decay=weight_decay)
    raise InputError(f"unknown optimizer {name!r}")


def apply_step(opt, params, grads, lr):
    return sgd_step(params, grads, lr) if opt is None else opt.step(params, grads, lr)
