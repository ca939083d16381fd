"""Momentum SGD and Adam over named parameter groups."""
from __future__ import annotations

from typing import Dict, List

import numpy as np

from .exceptions import ConfigurationError
from .tensor import Tensor


class SGD:
    """``v = momentum * v + (grad + weight_decay * p)``; ``p -= lr * v``.

    ``groups`` maps a group name to its parameters, ``lrs`` maps the name to
    its learning rate. Groups with a zero learning rate are left untouched.
    """

    def __init__(self, groups: Dict[str, List[Tensor]], lrs: Dict[str, float],
                 momentum: float = 0.9, weight_decay: Dict[str, float] = None):
        self.groups = {k: list(v) for k, v in groups.items() if v}
        self.lrs = dict(lrs)
        self.momentum = momentum
        self.weight_decay = dict(weight_decay or {})
        self._velocity = {id(p): np.zeros_like(p.data) for ps in self.groups.values() for p in ps}

    def zero_grad(self):
        for ps in self.groups.values():
            for p in ps:
                p.grad = None

    def step(self):
        for name, ps in self.groups.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0:
                continue
            wd = self.weight_decay.get(name, 0.0)
            for p in ps:
                if p.grad is None:
                    continue
                g = p.grad if not wd else p.grad + wd * p.data
                v = self._velocity[id(p)]
                v *= self.momentum
                v += g
                p.data -= (lr * v).astype(p.dtype, copy=False)


class Adam:
    """Adam with per-group learning rates (bias-corrected moments)."""

    def __init__(self, groups: Dict[str, List[Tensor]], lrs: Dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: Dict[str, float] = None):
        self.groups = {k: list(v) for k, v in groups.items() if v}
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = eps
        self.weight_decay = dict(weight_decay or {})
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for ps in self.groups.values() for p in ps}
        self._v = {id(p): np.zeros_like(p.data) for ps in self.groups.values() for p in ps}

    def zero_grad(self):
        for ps in self.groups.values():
            for p in ps:
                p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, ps in self.groups.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0:
                continue
            wd = self.weight_decay.get(name, 0.0)
            for p in ps:
                if p.grad is None:
                    continue
                g = p.grad if not wd else p.grad + wd * p.data
                m, v = self._m[id(p)], self._v[id(p)]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(kind: str, groups, lrs, momentum: float = 0.9, weight_decay=None):
    if kind == "sgd":
        return SGD(groups, lrs, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(groups, lrs, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
