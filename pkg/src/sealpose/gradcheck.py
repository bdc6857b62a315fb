"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Node, backward
from .errors import ContractError, NumericError
from .params import ParamStore

Objective = Callable[[Mapping[str, Node]], Node]


def _evaluate(f: Objective, params: ParamStore, overrides: Mapping[str, np.ndarray]) -> float:
    nodes = {name: Node(overrides.get(name, arr)) for name, arr in params.items()}
    value = float(f(nodes).value)
    if not np.isfinite(value):
        raise NumericError("objective returned a non-finite value during finite differencing")
    return value


def finite_diff_check(
    f: Objective,
    params: ParamStore,
    step: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Largest ``|autodiff - central difference| / max(1, |central difference|)``.

    ``f`` maps a dict of parameter nodes to a scalar node. With ``max_probes``
    set, at most that many coordinates per parameter are probed, chosen by a
    seeded generator; otherwise every coordinate is checked.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    nodes = params.nodes()
    root = f(nodes)
    if not np.isfinite(root.value).all():
        raise NumericError("objective returned a non-finite value")
    grads = backward(root, nodes)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        flat_idx = np.arange(arr.size)
        if max_probes is not None and arr.size > max_probes:
            flat_idx = np.sort(rng.choice(arr.size, size=max_probes, replace=False))
        analytic = grads[name].ravel()
        for k in flat_idx:
            bumped = arr.copy().ravel()
            bumped[k] += step
            hi = _evaluate(f, params, {name: bumped.reshape(arr.shape)})
            bumped[k] -= 2 * step
            lo = _evaluate(f, params, {name: bumped.reshape(arr.shape)})
            numeric = (hi - lo) / (2 * step)
            worst = max(worst, abs(analytic[k] - numeric) / max(1.0, abs(numeric)))
    return worst
