"""Image-quality and event-denoising metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .events import SIGNAL, UNLABELED, EventStream
from .retinex import luminance

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def psnr(pred, ref) -> float:
    """Peak signal-to-noise ratio for unit peak, capped at 100 dB."""
    pred, ref = _check_pair(pred, ref)
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def optimal_scale(pred, ref) -> float:
    """Least-squares gain s minimizing ||s * pred - ref||^2."""
    pred, ref = _check_pair(pred, ref)
    denom = float(np.sum(pred * pred))
    if denom == 0.0:
        raise ValueError("prediction is identically zero")
    return float(np.sum(pred * ref)) / denom


def psnr_star(pred, ref) -> tuple[float, dict]:
    """PSNR after global least-squares gain correction of ``pred``.

    Returns the value and flags: ``zero_pred`` (fell back to plain PSNR)
    and ``clipped`` (the rescaled prediction left [0, 1]).
    """
    pred, ref = _check_pair(pred, ref)
    try:
        s = optimal_scale(pred, ref)
    except ValueError:
        return psnr(pred, ref), {"zero_pred": True, "clipped": False, "scale": float("nan")}
    scaled = s * pred
    clipped = bool(np.any(scaled > 1.0) or np.any(scaled < 0.0))
    return psnr(np.clip(scaled, 0.0, 1.0), ref), {"zero_pred": False, "clipped": clipped, "scale": s}


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def ssim(pred, ref) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows, on luminance."""
    pred, ref = _check_pair(pred, ref)
    a, b = luminance(pred), luminance(ref)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class EventPRF:
    precision: float
    recall: float
    f1: float
    flags: list = field(default_factory=list)


def event_prf(kept: EventStream, reference: EventStream) -> EventPRF:
    """Precision/recall/F1 of ``kept`` against the signal labels of ``reference``.

    Empty denominators give 0 and add a flag naming the metric.
    """
    for name, s in (("kept", kept), ("reference", reference)):
        if s.label is None or np.any(s.label == UNLABELED):
            raise ValueError(f"{name} stream has unlabeled events")
    kept_signal = int(np.sum(kept.label == SIGNAL))
    total_signal = int(np.sum(reference.label == SIGNAL))
    flags = []
    if len(kept):
        precision = kept_signal / len(kept)
    else:
        precision = 0.0
        flags.append("precision_undefined")
    if total_signal:
        recall = kept_signal / total_signal
    else:
        recall = 0.0
        flags.append("recall_undefined")
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append("f1_undefined")
    return EventPRF(precision, recall, f1, flags)


@dataclass
class MetricReport:
    psnr: float
    psnr_star: float
    ssim: float
    event_precision: float = float("nan")
    event_recall: float = float("nan")
    event_f1: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def image_report(pred, ref) -> MetricReport:
    """PSNR, PSNR* and SSIM; SSIM is NaN (with a warning) below the window size."""
    value, _ = psnr_star(pred, ref)
    if min(np.shape(ref)[:2]) < SSIM_WINDOW:
        logger.warning("image %s smaller than the SSIM window; reporting NaN", np.shape(ref)[:2])
        structural = float("nan")
    else:
        structural = ssim(pred, ref)
    return MetricReport(psnr(pred, ref), value, structural)
