"""Spatially-adaptive gradient-guided event filtering.

A pixel keeps its events when the reflectance gradient there lies outside
the band ``(q - mu, q + mu)`` around the local mean gradient ``q`` (or,
in ``high_pass`` mode, strictly above ``q + mu``). ``q`` is the mean
gradient magnitude over a centered ``window x window`` neighbourhood,
floored at ``q_floor``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .events import EventStream, polarity_map


@dataclass(frozen=True)
class DenoiseConfig:
    window: int = 5
    mu: float = 0.01
    q_floor: float = 0.01
    band_mode: str = "two_sided"
    stride: int = 1

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.mu < 0 or self.q_floor < 0:
            raise ValueError("mu and q_floor must be non-negative")
        if self.band_mode not in ("two_sided", "high_pass"):
            raise ValueError(f"unknown band_mode {self.band_mode!r}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def adaptive_threshold(grad: np.ndarray, cfg: DenoiseConfig = DenoiseConfig()) -> np.ndarray:
    """Per-pixel windowed mean of ``|grad|`` (replicate padded), floored.

    The window is summed row by row, left to right, so results are
    reproducible by a plain nested loop.
    """
    grad = np.asarray(grad, dtype=np.float64)
    h, w = grad.shape
    k = cfg.window
    if k > 2 * min(h, w):
        raise ValueError(f"window {k} too large for a {h}x{w} gradient map")
    padded = np.pad(np.abs(grad), k // 2, mode="edge")
    acc = np.zeros((h, w))
    for dy in range(k):
        for dx in range(k):
            acc += padded[dy : dy + h, dx : dx + w]
    return np.maximum(acc / (k * k), cfg.q_floor)


def compute_mask(grad: np.ndarray, qmap: np.ndarray, cfg: DenoiseConfig = DenoiseConfig()) -> np.ndarray:
    """Gradient magnitude where kept, 0 where suppressed."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != qmap.shape:
        raise ValueError(f"gradient {grad.shape} and threshold {qmap.shape} shapes differ")
    if cfg.band_mode == "two_sided":
        keep = (grad <= qmap - cfg.mu) | (grad >= qmap + cfg.mu)
    else:
        keep = grad > qmap + cfg.mu
    return np.where(keep, grad, 0.0)


def apply_mask(stream: EventStream, mask: np.ndarray) -> EventStream:
    """Keep events whose pixel has a nonzero mask value; order is preserved."""
    if mask.shape != (stream.height, stream.width):
        raise ValueError(f"mask {mask.shape} does not match sensor {stream.height}x{stream.width}")
    keep = mask[stream.y, stream.x] != 0
    return stream.take(np.flatnonzero(keep))


def gradient_mask(grad: np.ndarray, cfg: DenoiseConfig = DenoiseConfig()) -> np.ndarray:
    return compute_mask(grad, adaptive_threshold(grad, cfg), cfg)


def pseudo_labels(stream: EventStream, mask: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Three-class target map from the masked events inside ``window``."""
    t0, t1 = window
    return polarity_map(apply_mask(stream, mask), t0, t1)
