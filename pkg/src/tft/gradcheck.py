"""Central finite-difference gradient checking."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, extended_precision, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max of |a - n| / (|a| + |n|), ignoring entries where |a| + |n| < floor."""
    denom = np.abs(analytic) + np.abs(numeric)
    keep = denom >= floor
    if not keep.any():
        return 0.0
    return float((np.abs(analytic - numeric)[keep] / denom[keep]).max())


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    extended: bool = False,
) -> list[GradCheckResult]:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    With ``max_entries`` only that many randomly chosen coordinates per
    parameter are perturbed.  ``extended`` evaluates the perturbed losses in
    ``np.longdouble``: central differences at ``eps`` amplify forward-pass
    rounding by ``1 / eps``, which in float64 swamps gradients near 1e-8.
    """
    for _, p in params:
        p.grad = None
    backward(loss_fn())
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params}
    originals = [p.data for _, p in params]
    wide = np.longdouble if extended else np.float64
    for _, p in params:
        p.data = p.data.astype(wide)
    ctx = extended_precision() if extended else contextlib.nullcontext()
    rng = np.random.default_rng(seed)
    results = []
    try:
        with no_grad(), ctx:
            for name, p in params:
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                numeric = np.empty(idx.size)
                for n, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + wide(eps)
                    up = loss_fn().data
                    flat[i] = orig - wide(eps)
                    down = loss_fn().data
                    flat[i] = orig
                    numeric[n] = float((up - down) / (2 * wide(eps)))
                err = relative_error(analytic[name].reshape(-1)[idx], numeric)
                results.append(GradCheckResult(name, err, int(idx.size)))
    finally:
        for (_, p), data in zip(params, originals):
            p.data = data
    return results
