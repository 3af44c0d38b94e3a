"""Adam(W) updates, gradient clipping and the learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor

ADAM_EPS = 1e-8


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    m: Sequence[np.ndarray],
    v: Sequence[np.ndarray],
    lr: float,
    beta1: float,
    beta2: float,
    weight_decay: float,
    t: int,
    decoupled: bool = True,
    eps: float = ADAM_EPS,
    decay_mask: Sequence[bool] | None = None,
):
    """One bias-corrected Adam update, in place; returns ``(params, m, v)``.

    ``decoupled`` applies weight decay directly to the parameters (AdamW);
    otherwise it is folded into the gradient as an L2 term (plain Adam).
    """
    if t < 1:
        raise ValueError(f"step counter must start at 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if wd and not decoupled:
            g = g + wd * p
        m[i] *= beta1
        m[i] += (1.0 - beta1) * g
        v[i] *= beta2
        v[i] += (1.0 - beta2) * (g * g)
        update = (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)
        if wd and decoupled:
            p -= lr * wd * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, m, v


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm before clipping)``.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm


def lr_schedule(step: int, warmup_steps: int, base_lr: float, batch_size: int = 256) -> float:
    """Linear warmup to ``base_lr * batch_size / 256``, then constant."""
    peak = base_lr * batch_size / 256.0
    if warmup_steps <= 0:
        return peak
    return peak * min(1.0, step / warmup_steps)


class Adam:
    """Stateful wrapper over :func:`adamw_step` for a list of parameters."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, weight_decay=0.0, decoupled=True):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        # matrices and embedding tables decay; gains and biases do not
        self.decay_mask = [p.ndim >= 2 for p in self.params]

    def step(self, lr: float, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        adamw_step(
            [p.data for p in self.params], grads, self.m, self.v, lr,
            self.beta1, self.beta2, self.weight_decay, self.t,
            decoupled=self.decoupled, decay_mask=self.decay_mask,
        )
