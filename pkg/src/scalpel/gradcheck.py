"""Central finite-difference gradient checks.

These only ever call the forward function, so they stay independent of the
backward closures they are used to validate. The finite differences are taken
in 64-bit on upcast copies of the parameters: a 32-bit analytic gradient is
then compared against an oracle whose own rounding noise is negligible.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision


def numerical_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-3,
    entries: Sequence[int] | None = None,
) -> np.ndarray:
    """Finite-difference gradient of scalar ``fn()`` w.r.t. ``param``.

    ``entries`` restricts the probe to those flat indices; other positions
    come back as NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan, dtype=np.float64)
    idx = range(flat.size) if entries is None else entries
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            out[i] = (up - down) / (2 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(|a|, |n|)`` over the probed entries (inf-norm)."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    denom = max(np.abs(a).max(), np.abs(n).max())
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / denom)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst per-tensor relative error between backward() and finite differences.

    ``params`` must include every tensor ``fn`` reads from that should be
    upcast for the oracle (typically all model and adapter parameters).
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros(p.shape) for p in params]

    rng = rng or np.random.default_rng(0)
    originals = [p.data for p in params]
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        with precision(np.float64):
            for p, a in zip(params, analytic):
                entries = None
                if max_entries is not None and p.size > max_entries:
                    entries = rng.choice(p.size, size=max_entries, replace=False)
                worst = max(worst, relative_error(a, numerical_grad(fn, p, step, entries)))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst
