"""Dense training tensors assembled from scene samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoise import DenoiseConfig, gradient_mask, pseudo_labels
from .events import counts_to_input, rasterize_counts
from .networks import decompose_batch
from .retinex import decompose, gradient_magnitude
from .sim import SceneSample


@dataclass(frozen=True)
class Batch:
    counts: np.ndarray  # (N, 2, H, W) scaled noisy event counts
    x_low: np.ndarray  # (N, H, W, 3)
    x_l: np.ndarray  # (N, 1, H, W) low-light illumination
    x_r: np.ndarray  # (N, 3, H, W) low-light reflectance
    high: np.ndarray  # (N, 3, H, W) reference image
    l_target: np.ndarray  # (N, 1, H, W) reference illumination
    r_target: np.ndarray  # (N, 3, H, W) reference reflectance
    labels: np.ndarray  # (N, H, W) pseudo-label classes

    def __len__(self) -> int:
        return self.counts.shape[0]

    def take(self, index) -> "Batch":
        return Batch(*(getattr(self, f)[index] for f in self.__dataclass_fields__))


def make_batch(samples: list[SceneSample], cfg: DenoiseConfig = DenoiseConfig()) -> Batch:
    """Inputs from the last low-light frame and the noisy events of the last
    frame interval; pseudo-labels from the reference reflectance gradient."""
    if not samples:
        raise ValueError("cannot build a batch from zero samples")
    counts, labels = [], []
    for s in samples:
        t0, t1 = s.window
        counts.append(counts_to_input(rasterize_counts(s.events, t0, t1)))
        grad = gradient_magnitude(decompose(s.high).reflectance)
        labels.append(pseudo_labels(s.events, gradient_mask(grad, cfg), s.window))
    x_low = np.stack([s.low for s in samples])
    high = np.stack([s.high for s in samples])
    x_l, x_r = decompose_batch(x_low)
    l_target, r_target = decompose_batch(high)
    return Batch(
        np.stack(counts),
        x_low,
        x_l,
        x_r,
        np.moveaxis(high, -1, 1),
        l_target,
        r_target,
        np.stack(labels).astype(np.int64),
    )
