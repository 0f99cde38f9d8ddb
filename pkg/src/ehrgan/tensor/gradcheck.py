"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor, backward, no_grad


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place.

    With ``coords`` (flat indices) only those entries are estimated; the
    rest of the result stays zero.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    Entries whose absolute discrepancy is below ``floor`` count as exact.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.where(diff <= floor, 0.0, diff / scale)
    return float(rel.max(initial=0.0))


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-5,
                    floor: float = 1e-6, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare backprop against finite differences for each named tensor.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of the
    tensors on every call. Returns the max relative error per name. Large
    tensors can be spot-checked: with ``max_coords`` at most that many
    entries per tensor, drawn from ``rng``, are differenced.
    """
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    backward(loss)
    analytic = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for n, t in tensors.items()}

    def scalar() -> float:
        with no_grad():
            return float(loss_fn().data)

    errors = {}
    for n, t in tensors.items():
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(t.data.size, max_coords, replace=False))
        num = numerical_grad(scalar, t.data, h, coords)
        a = analytic[n]
        if coords is not None:
            a, num = a.reshape(-1)[coords], num.reshape(-1)[coords]
        errors[n] = max_rel_error(a, num, floor)
    return errors
