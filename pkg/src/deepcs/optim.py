"""Adam and gradient-norm clipping over :class:`~deepcs.tensor.Parameter` lists."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """One bias-corrected Adam update; zeroes gradients afterwards.

    Parameters flagged ``trainable=False`` are skipped but still have their
    gradients cleared.
    """
    for p in params:
        if not p.trainable:
            p.zero_grad()
            continue
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** t)
        v_hat = p.adam_v / (1 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + epsilon)
        p.value.data = (p.value.data - update).astype(p.value.data.dtype)
        p.zero_grad()


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= p.grad.dtype.type(factor)
    return norm
