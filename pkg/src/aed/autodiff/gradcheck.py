"""Central finite-difference checking of analytic gradients."""
from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .engine import Node, backward


def finite_diff_check(
    builder: Callable[[], Node],
    params: Sequence[Node],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Worst-case relative gradient error for each parameter.

    ``builder`` rebuilds the scalar graph from the current parameter values.
    Analytic gradients come from :func:`backward`; numerical ones from
    ``(f(p + eps) - f(p - eps)) / (2 eps)``. ``max_entries`` caps the number
    of randomly chosen coordinates probed per parameter.

    The error for a parameter is ``max|a - n| / max(max|a|, max|n|)`` over the
    probed coordinates, so entries with vanishing gradient do not dominate.
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise ValueError("finite_diff_check requires 64-bit parameters")
    grads = backward(builder())
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for i, p in enumerate(params):
        analytic = grads.get(p, np.zeros_like(p.value)).ravel()
        flat = p.value.reshape(-1)  # view: edits write through
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(builder().value)
            flat[c] = orig - eps
            fm = float(builder().value)
            flat[c] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        a = analytic[coords]
        scale = max(np.max(np.abs(a)), np.max(np.abs(numeric)))
        err = 0.0 if scale == 0 else float(np.max(np.abs(a - numeric)) / scale)
        errors[p.name or f"param{i}"] = err
    return errors
