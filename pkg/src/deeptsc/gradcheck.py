"""Central finite-difference gradients, used to audit the reverse-mode core."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6,
                 indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place).

    With ``indices`` (a list of flat positions) only those entries are
    evaluated; the rest of the result is NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max of ``|a - n| / max(|a|, |n|, floor)`` over entries where ``numeric`` is defined."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    ok = ~np.isnan(n)
    a, n = a[ok], n[ok]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def relu_pattern(root: ad.Tensor) -> list[np.ndarray]:
    """On/off pattern of every ReLU input in the graph behind ``root``."""
    return [n._parents[0].data > 0 for n in ad._topo(root) if n.op == "relu"]


def _same(pa, pb) -> bool:
    return len(pa) == len(pb) and all(np.array_equal(a, b) for a, b in zip(pa, pb))


def numeric_grad_smooth(f: Callable[[], tuple[float, list]], x: np.ndarray, h: float = 1e-5,
                        indices=None) -> tuple[np.ndarray, int]:
    """Central differences that skip coordinates whose +-h probe crosses a ReLU kink.

    ``f()`` returns ``(value, pattern)`` with ``pattern`` from :func:`relu_pattern`.
    Skipped entries are NaN; the second return value counts them.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    _, base = f()
    skipped = 0
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp, pp = f()
        flat[i] = orig - h
        fm, pm = f()
        flat[i] = orig
        if _same(pp, base) and _same(pm, base):
            out[i] = (fp - fm) / (2 * h)
        else:
            skipped += 1
    return out.reshape(x.shape), skipped
