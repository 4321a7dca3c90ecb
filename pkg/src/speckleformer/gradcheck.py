"""Central-difference gradient checking against the taped backward pass."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import ParameterStore, Tensor, record


def grad_check(fn: Callable[[], Tensor], params: ParameterStore,
               h: float = 1e-5, *, coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare taped gradients of ``fn()`` with central differences.

    ``fn`` must be deterministic at fixed parameter values (no dropout).
    Returns the maximum over all checked coordinates of
    ``|analytic - central| / max(1, |central|)``. By default every
    coordinate of every parameter is perturbed; ``coords_per_param``
    caps the number of (seeded) randomly chosen coordinates per
    parameter, which keeps large models tractable.
    """
    params.zero_grad()
    with record() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = {name: (np.zeros(t.shape) if t.grad is None else t.grad.copy())
                for name, t in params.items()}
    params.zero_grad()

    if coords_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + h
            f_plus = fn().item()
            flat[idx] = original - h
            f_minus = fn().item()
            flat[idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ContractError(
                    f"non-finite value while perturbing parameter {name!r}")
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[name].reshape(-1)[idx] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
