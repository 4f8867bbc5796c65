"""Classical reflectance/illumination split used in place of a learned decomposer.

Illumination is the per-pixel channel maximum, box-blurred and floored;
reflectance is the image divided by it. Both are fixed numpy functions and
never part of a gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ILLUM_FLOOR = 1e-3
BLUR_RADIUS = 3
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RetinexPair:
    reflectance: np.ndarray  # (H, W, 3) in [0, 1]
    illumination: np.ndarray  # (H, W) in [ILLUM_FLOOR, 1]


def box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window with replicate padding, via summed-area table."""
    k = 2 * radius + 1
    padded = np.pad(image, radius, mode="edge")
    sat = np.pad(padded, ((1, 0), (1, 0))).cumsum(axis=0).cumsum(axis=1)
    h, w = image.shape
    total = sat[k : k + h, k : k + w] - sat[:h, k : k + w] - sat[k : k + h, :w] + sat[:h, :w]
    return total / (k * k)


def decompose(image: np.ndarray, radius: int = BLUR_RADIUS, floor: float = ILLUM_FLOOR) -> RetinexPair:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    illumination = np.maximum(box_blur(image.max(axis=2), radius), floor)
    reflectance = np.clip(image / illumination[..., None], 0.0, 1.0)
    return RetinexPair(reflectance, illumination)


def recompose(pair: RetinexPair) -> np.ndarray:
    return pair.reflectance * pair.illumination[..., None]


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image if image.ndim == 2 else image @ LUMA


def gradient_magnitude(image: np.ndarray, method: str = "forward") -> np.ndarray:
    """Gradient magnitude of the luminance, (H, W), non-negative.

    ``forward`` uses forward differences with a replicated last row/column
    (so the boundary difference is zero); ``sobel`` uses 3x3 Sobel kernels
    with replicate padding, scaled by 1/8.
    """
    lum = luminance(image)
    if method == "forward":
        gx = np.zeros_like(lum)
        gy = np.zeros_like(lum)
        gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
        gy[:-1, :] = lum[1:, :] - lum[:-1, :]
    elif method == "sobel":
        p = np.pad(lum, 1, mode="edge")
        gx = ((p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])) / 8.0
        gy = ((p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])) / 8.0
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return np.sqrt(gx * gx + gy * gy)
