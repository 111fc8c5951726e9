"""Central finite-difference checks for the 64-bit check mode."""
from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-3) -> np.ndarray:
    """d f() / d param by central differences, perturbing ``param.data`` in place."""
    out = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> Dict[str, float]:
    """Compare backward() against finite differences for every parameter.

    ``f`` must rebuild the graph on each call and be deterministic. Parameters
    should be float64. Returns the relative error per parameter name.
    """
    for p in params:
        p.grad = None
    f().backward()
    errors = {}
    for i, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        errors[p.name or f"param{i}"] = relative_error(analytic, numeric_grad(f, p, h))
    return errors
