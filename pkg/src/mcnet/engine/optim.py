from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from mcnet.engine.tensor import LayerParams
from mcnet.errors import GradientError


@dataclass
class AdamConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self):
        return asdict(self)


def adam_step(params, lr=1e-5, beta1=0.9, beta2=0.999, eps_adam=1e-8):
    """One bias-corrected Adam update applied in place to every ``LayerParams``.

    Raises :class:`GradientError` if any tensor has no gradient; nothing is
    updated in that case.
    """
    params = list(params)
    for p in params:
        for slot in ("weight", "bias"):
            if getattr(p, slot).grad is None:
                raise GradientError(f"adam_step: {slot} of a {p.weight.shape} layer has no gradient")
    for p in params:
        p.step_count += 1
        t = p.step_count
        for slot in ("weight", "bias"):
            tensor = getattr(p, slot)
            g = tensor.grad
            m = p.adam_m[slot]
            v = p.adam_v[slot]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * (g * g)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            update = lr * m_hat / (np.sqrt(v_hat) + eps_adam)
            tensor.data -= update.astype(tensor.dtype, copy=False)
    return params


def zero_grad(params):
    for p in params:
        p.zero_grad()


__all__ = ["AdamConfig", "LayerParams", "adam_step", "zero_grad"]
