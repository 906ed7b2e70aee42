"""Adam optimizer and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


class GradientError(ValueError):
    """Raised when a gradient is non-finite; the step is not applied."""


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters for a named parameter set."""

    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, Tensor],
                   state: OptimizerState) -> OptimizerState:
    """One Adam update, in place on the parameter tensors.

    Weight decay is decoupled (applied directly to the parameter, not mixed
    into the moments).  Raises before touching anything if any gradient is
    non-finite, so a failed step leaves parameters and state unchanged.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise KeyError(f"param/grad key sets differ: {sorted(missing)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g.data)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name].data.astype(p.dtype)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p.data -= p.dtype.type(state.lr * state.weight_decay) * p.data
        p.data -= p.dtype.type(state.lr) * update.astype(p.dtype)
    return state


def named_grads(params: dict[str, Tensor], grad_map: dict[int, Tensor]) -> dict[str, Tensor]:
    """Map a backward() result (node id keyed) onto parameter names.

    Parameters that did not participate in the pass get zero gradients.
    """
    out = {}
    for name, p in params.items():
        g = grad_map.get(p.node_id) if p.node_id is not None else None
        out[name] = g if g is not None else Tensor(np.zeros_like(p.data))
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor,
               h: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued fn against central
    finite differences, elementwise.  Use float64 inputs; float32 cannot
    resolve the check tolerance.

    Relative error uses denominator max(|a|, |b|, 1e-8).
    """
    probe = Tensor(x.data.astype(np.float64).copy(), requires_grad=True)
    loss = fn(probe)
    grad_map = backward(loss)
    analytic = grad_map[probe.node_id].data

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(Tensor(probe.data.copy())).item()
            flat[i] = orig - h
            f_minus = fn(Tensor(probe.data.copy())).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()), float(rel.mean()), int(rel.size))
