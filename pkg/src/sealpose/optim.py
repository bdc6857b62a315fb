"""Adam with bias correction and a constant learning rate."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError
from .params import ParamStore


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, arr in params.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> ParamStore:
    """Apply one Adam update to ``params`` in place and return it."""
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    missing = [name for name in params.names() if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {missing[:5]}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in params.names():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        if lr == 0.0:
            continue
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] = params[name] - step
    return params
