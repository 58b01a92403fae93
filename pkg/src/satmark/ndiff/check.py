"""Finite-difference verification of tape gradients.

Runs in float64 regardless of the runtime dtype: the analytic pass builds
float64 tensors and the numeric pass perturbs float64 copies, so the
comparison is limited by truncation error of the central difference, not by
float32 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tape, Tensor, backward


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float
    worst_input: int
    worst_component: int
    analytic: list = field(repr=False, default_factory=list)
    numeric: list = field(repr=False, default_factory=list)


def grad_check(fn, inputs, step: float = 1e-3, tol: float = 1e-3, rel_floor: float = 1e-4) -> GradCheckResult:
    """Compare tape gradients of a scalar-valued fn against central
    differences.

    fn takes len(inputs) Tensors and returns a scalar Tensor. inputs are
    arrays (coerced to float64). The relative error of a component is
    |a - n| / max(|a|, |n|, rel_floor); the floor keeps exactly-zero
    gradients from dividing by zero. Non-smooth points are the caller's
    problem: keep inputs away from kinks by at least a few steps.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(tape, out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in ts
    ]

    def value_at(arrs) -> float:
        frozen = [Tensor(a, requires_grad=False) for a in arrs]
        return fn(*frozen).item()

    numeric = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = value_at(arrays)
            flat[j] = orig - step
            lo = value_at(arrays)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * step)
        numeric.append(g)

    max_rel = 0.0
    worst = (0, 0)
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), rel_floor)
        rel = np.abs(a - n) / denom
        j = int(np.argmax(rel))
        if rel.reshape(-1)[j] > max_rel:
            max_rel = float(rel.reshape(-1)[j])
            worst = (i, j)
    return GradCheckResult(
        passed=max_rel <= tol,
        max_rel_err=max_rel,
        worst_input=worst[0],
        worst_component=worst[1],
        analytic=analytic,
        numeric=numeric,
    )
