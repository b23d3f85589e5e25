"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping, Optional, Union

import numpy as np

from .tensor import Graph, NonFiniteError, Tensor, backward

Params = Union[Tensor, Mapping[str, Tensor]]


def _as_dict(x: Params) -> dict[str, Tensor]:
    return {"x": x} if isinstance(x, Tensor) else dict(x)


def _call(f, params: dict[str, Tensor], single: bool) -> Tensor:
    return f(params["x"]) if single else f(params)


def _scalar(v) -> float:
    val = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
    if not np.isfinite(val):
        raise NonFiniteError("finite-difference evaluation returned a non-finite value")
    return val


def analytic_gradient(f: Callable, x: Params) -> dict[str, np.ndarray]:
    single = isinstance(x, Tensor)
    params = _as_dict(x)
    with Graph(params) as g:
        loss = _call(f, params, single)
    return {k: v.data for k, v in backward(g, loss).items()}


def finite_difference_check(f: Callable, x: Params, h: float = 1e-6,
                            grad: Optional[Union[np.ndarray, Mapping[str, np.ndarray]]] = None,
                            relative_step: bool = False) -> float:
    """Max over coordinates of ``|fd_i - g_i| / max(1, |g_i|)``.

    ``f`` maps ``x`` (a tensor, or a dict of named tensors) to a scalar.
    ``grad`` overrides the analytic gradient, which is otherwise obtained
    with :func:`backward`. With ``relative_step`` the step for coordinate
    ``i`` is ``h * max(1, |x_i|)``.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    single = isinstance(x, Tensor)
    params = _as_dict(x)
    if grad is None:
        grads = analytic_gradient(f, x)
    elif single:
        grads = {"x": np.asarray(grad)}
    else:
        grads = {k: np.asarray(v) for k, v in grad.items()}

    worst = 0.0
    for name, p in params.items():
        base = p.data
        flat_g = grads[name].reshape(-1)
        for i in range(base.size):
            step = h * max(1.0, abs(float(base.flat[i]))) if relative_step else h
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped.flat[i] += sign * step
                trial = dict(params)
                trial[name] = Tensor(bumped)
                vals.append(_scalar(_call(f, trial, single)))
            fd = (vals[0] - vals[1]) / (2 * step)
            g_i = float(flat_g[i])
            worst = max(worst, abs(fd - g_i) / max(1.0, abs(g_i)))
    return worst
