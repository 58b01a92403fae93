"""AdamW with decoupled weight decay.

Update for each parameter p with gradient g at step t (1-based):
    m   <- beta1 * m + (1 - beta1) * g
    v   <- beta2 * v + (1 - beta2) * g*g
    mh  = m / (1 - beta1**t)
    vh  = v / (1 - beta2**t)
    p   <- p - lr * mh / (sqrt(vh) + eps) - lr * weight_decay * p
The decay term multiplies the raw parameter, not the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One optimizer step over a named parameter dict, in place.

    Parameters with grad None are skipped (their moments are not advanced
    either, matching lazily-created state). Moments are float32.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        g = g.astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float32)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data, dtype=np.float32)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)).astype(
            p.data.dtype
        )


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
