"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, get_precision


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``param``."""
    if not param.data.flags.c_contiguous:
        param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = float(f().data)
        flat[i] = saved - step
        down = float(f().data)
        flat[i] = saved
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6) -> float:
    """Worst relative disagreement between autodiff and finite differences.

    ``f`` must be deterministic (dropout off or mask frozen) and rebuild its
    graph on every call. The error per coordinate is
    ``|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)``.
    """
    if get_precision() != "float64":
        raise RuntimeError("finite_diff_check requires 64-bit precision mode")
    for p in params:
        p.zero_grad()
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = numerical_gradient(f, p, step)
        rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
