"""Plain gradient and Adam updates on ParamSets, plus a cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .params import ParamSet, zeros_like

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def _check(params: Mapping, grads: Mapping) -> None:
    for name, value in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if np.shape(g) != value.shape:
            raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, expected {value.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")


def sgd_step(params: ParamSet, grads: Mapping, lr: float) -> ParamSet:
    """``p <- p - lr * g`` for every entry."""
    _check(params, grads)
    return ParamSet((k, v - lr * grads[k]) for k, v in params.items())


@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0

    @classmethod
    def init(cls, params: ParamSet) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0)


def adam_step(
    params: ParamSet, grads: Mapping, state: AdamState, lr: float
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new params and advanced state."""
    _check(params, grads)
    t = state.step + 1
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    new_p, new_m, new_v = [], [], []
    for name, p in params.items():
        g = grads[name]
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_p.append((name, p))
        new_m.append((name, m))
        new_v.append((name, v))
    return ParamSet(new_p), AdamState(ParamSet(new_m), ParamSet(new_v), t)


def cosine_lr(k: int, period: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing with warm restarts every ``period`` iterations."""
    if period <= 0:
        return lr_max
    phase = (k % period) / period
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * phase))
