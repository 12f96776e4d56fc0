"""AdamW with decoupled weight decay and the warmup+cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .errors import ConfigError
from .tensor import Tensor


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int,
                     lr_peak: float) -> float:
    """Linear ramp 0 -> lr_peak over warmup, then half-cosine decay to 0."""
    if warmup_steps > total_steps:
        raise ConfigError(
            f"warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    if total_steps == warmup_steps:
        return lr_peak
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd * p).

    Moments live per parameter and persist for the optimizer's lifetime;
    the shared step counter advances once per step() call.
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.05,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()}
        self._v = {k: np.zeros(p.shape, dtype=p.dtype) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_moments(self, names=None):
        for k in (names if names is not None else self.params):
            self._m[k][:] = 0
            self._v[k][:] = 0

    def step(self, lr: float):
        self.t += 1
        kern = _kernels.impl()
        for k, p in self.params.items():
            if p.grad is None:
                continue
            kern.adamw_update(
                p.data.reshape(-1), p.grad.reshape(-1),
                self._m[k].reshape(-1), self._v[k].reshape(-1),
                p.dtype.type(lr), self.beta1, self.beta2,
                p.dtype.type(self.eps), p.dtype.type(self.wd), self.t,
            )
