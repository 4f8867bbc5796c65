"""Finite-difference gradients, used as the independent oracle for backward."""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .params import ParamSet
from .tensor import Tape


def fd_gradient(
    f: Callable[[ParamSet], float],
    params: ParamSet,
    h: float = 1e-5,
    *,
    coords: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    ``coords`` optionally restricts each parameter to a set of flat
    indices; the remaining entries of the result are NaN.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = {k: v.copy() for k, v in params.items()}
    grads = {}
    for name, value in base.items():
        flat_idx = range(value.size) if coords is None else coords.get(name, ())
        g = np.full(value.size, np.nan) if coords is not None else np.zeros(value.size)
        for i in flat_idx:
            vals = []
            for sign in (1.0, -1.0):
                probe = value.copy().reshape(-1)
                probe[i] += sign * h
                trial = ParamSet((k, probe.reshape(value.shape) if k == name else v) for k, v in base.items())
                fv = float(f(trial))
                if not math.isfinite(fv):
                    raise ValueError(f"f is not finite at {name}[{i}] {'+' if sign > 0 else '-'} h")
                vals.append(fv)
            g[i] = (vals[0] - vals[1]) / (2.0 * h)
        grads[name] = g.reshape(value.shape)
    return grads


def value_and_grad(fn: Callable, params: Mapping[str, np.ndarray], *args, **kwargs):
    """Evaluate ``fn(watched_params, *args)`` and differentiate it.

    Returns ``(value, ParamSet of gradients)``.
    """
    with Tape() as tape:
        leaves = tape.watch(params)
        loss = fn(leaves, *args, **kwargs)
        value = loss.item()
        grads = tape.backward(loss)
    return value, ParamSet((k, grads[k]) for k in params)


def max_relative_error(analytic: Mapping, numeric: Mapping) -> float:
    """Largest absolute discrepancy over the largest numeric magnitude.

    Entries that are NaN in ``numeric`` (unsampled coordinates) are ignored.
    """
    diffs, scales = [0.0], [1e-12]
    for name, num in numeric.items():
        num = np.asarray(num)
        keep = ~np.isnan(num)
        if not keep.any():
            continue
        ana = np.asarray(analytic[name])[keep]
        diffs.append(float(np.max(np.abs(ana - num[keep]))))
        scales.append(float(np.max(np.abs(num[keep]))))
    return max(diffs) / max(scales)
