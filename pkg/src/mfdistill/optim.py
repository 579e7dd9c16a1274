"""Optimisers and learning-rate schedule for the toy models."""

from __future__ import annotations

import math
from typing import Iterable, Tuple

import numpy as np

from .tensor import Tensor

NO_DECAY = ("pos_embed", "cls_token")


def decays(name: str, param: Tensor) -> bool:
    return param.ndim >= 2 and name not in NO_DECAY


def cosine_lr(step: int, total: int, base_lr: float, warmup: int = 0, min_lr: float = 0.0) -> float:
    """Linear warmup then cosine decay; ``step`` counts from 1."""
    if warmup and step <= warmup:
        return base_lr * step / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], weight_decay=0.05,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and decays(name, p):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """Plain SGD with decoupled weight decay; no momentum."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], weight_decay=0.0):
        self.params = list(named_params)
        self.weight_decay = weight_decay

    def step(self, lr: float):
        for name, p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay and decays(name, p):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * p.grad


def make_optimizer(kind: str, named_params, weight_decay: float):
    if kind == "adamw":
        return AdamW(named_params, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(named_params, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
