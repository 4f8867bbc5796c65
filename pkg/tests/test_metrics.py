import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from evbilevel.events import NOISE, SIGNAL, UNLABELED, EventStream
from evbilevel.metrics import event_prf, gaussian_window, image_report, optimal_scale, psnr, psnr_star, ssim
from evbilevel.retinex import luminance

from oracles import ssim_loop


def test_identical_images_hit_cap():
    x = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(x, x) == 100.0


def test_uniform_error():
    x = np.full((4, 4), 0.5)
    assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-12)


def test_psnr_invariant_to_joint_permutation():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=64), rng.uniform(size=64)
    perm = rng.permutation(64)
    assert psnr(a[perm], b[perm]) == pytest.approx(psnr(a, b), abs=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_star_recovers_exact_scale():
    ref = np.random.default_rng(2).uniform(0, 0.5, size=(8, 8, 3))
    value, flags = psnr_star(0.5 * ref, ref)
    assert value == 100.0
    assert flags["scale"] == pytest.approx(2.0)
    assert not flags["clipped"]


def test_psnr_star_of_identical_equals_psnr():
    x = np.random.default_rng(3).uniform(size=(6, 6))
    assert psnr_star(x, x)[0] == psnr(x, x)


def test_optimal_scale_matches_sweep():
    rng = np.random.default_rng(4)
    for _ in range(5):
        pred, ref = rng.uniform(size=50), rng.uniform(size=50)
        # brute-force grid, refined around the best point
        lo, hi = 0.0, 4.0
        for _ in range(6):
            grid = np.linspace(lo, hi, 2001)
            errs = [np.sum((s * pred - ref) ** 2) for s in grid]
            best = grid[int(np.argmin(errs))]
            step = grid[1] - grid[0]
            lo, hi = best - step, best + step
        assert optimal_scale(pred, ref) == pytest.approx(best, abs=1e-6)


def test_zero_prediction_falls_back_and_flags():
    ref = np.full((4, 4), 0.3)
    value, flags = psnr_star(np.zeros((4, 4)), ref)
    assert flags["zero_pred"]
    assert value == psnr(np.zeros((4, 4)), ref)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_psnr_star_never_worse_without_clipping(seed):
    rng = np.random.default_rng(seed)
    ref = rng.uniform(size=(5, 5))
    pred = rng.uniform(0, 0.9, size=(5, 5))
    value, flags = psnr_star(pred, ref)
    if not flags["clipped"]:
        assert value >= psnr(pred, ref) - 1e-9


def test_gaussian_window():
    g = gaussian_window()
    assert g.size == 11
    assert g.sum() == pytest.approx(1.0)
    assert g[5] == g.max()


def test_ssim_of_identical_is_one():
    x = np.random.default_rng(5).uniform(size=(16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_scalar_loop():
    rng = np.random.default_rng(6)
    a, b = rng.uniform(size=(14, 15)), rng.uniform(size=(14, 15))
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-12)


def test_ssim_of_inverted_binary_image_is_negative():
    rng = np.random.default_rng(7)
    x = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    value = ssim(x, 1 - x)
    assert value < -0.5
    assert value == pytest.approx(ssim_loop(x, 1 - x), abs=1e-12)


def test_ssim_of_shifted_pair_matches_oracle():
    rng = np.random.default_rng(8)
    a, b = rng.uniform(0, 0.8, size=(13, 13)), rng.uniform(0, 0.8, size=(13, 13))
    assert ssim(a + 0.1, b + 0.1) == pytest.approx(ssim_loop(a + 0.1, b + 0.1), abs=1e-9)


def test_ssim_shift_of_self_pair_stays_one():
    a = np.random.default_rng(12).uniform(0, 0.8, size=(12, 12))
    assert ssim(a + 0.1, a + 0.1) == pytest.approx(ssim(a, a), abs=1e-9)


def test_ssim_symmetric_and_uses_luminance():
    rng = np.random.default_rng(9)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(luminance(a), luminance(b)), abs=1e-15)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def _labeled(labels):
    n = len(labels)
    return EventStream(4, 4, np.arange(n), np.zeros(n), np.zeros(n), np.ones(n), np.array(labels))


def test_keep_everything():
    s = _labeled([SIGNAL, SIGNAL, NOISE, SIGNAL])
    prf = event_prf(s, s)
    assert prf.recall == 1.0
    assert prf.precision == 0.75


def test_keep_exactly_signal():
    s = _labeled([SIGNAL, NOISE, SIGNAL, NOISE])
    prf = event_prf(s.only(SIGNAL), s)
    assert (prf.precision, prf.recall, prf.f1) == (1.0, 1.0, 1.0)


def test_empty_denominators_flagged():
    s = _labeled([NOISE, NOISE])
    prf = event_prf(s.take([]), s)
    assert prf.precision == prf.recall == prf.f1 == 0.0
    assert set(prf.flags) == {"precision_undefined", "recall_undefined", "f1_undefined"}


def test_unlabeled_rejected():
    s = _labeled([SIGNAL, UNLABELED])
    with pytest.raises(ValueError):
        event_prf(s, s)
    with pytest.raises(ValueError):
        event_prf(EventStream(2, 2, [0], [0], [0], [1]), s)


def test_random_half_drop_recall():
    rng = np.random.default_rng(10)
    s = _labeled([SIGNAL] * 100)
    recalls = [event_prf(s.take(np.flatnonzero(rng.random(100) < 0.5)), s).recall for _ in range(1000)]
    sigma = math.sqrt(0.25 / 100) / math.sqrt(1000)
    assert abs(np.mean(recalls) - 0.5) < 3 * sigma
    assert 0.0 <= min(recalls) and max(recalls) <= 1.0


def test_image_report_bundles_metrics():
    x = np.random.default_rng(11).uniform(size=(12, 12, 3))
    rep = image_report(x, x)
    assert rep.psnr == rep.psnr_star == 100.0
    assert rep.ssim == pytest.approx(1.0)
    assert math.isnan(rep.to_dict()["event_f1"])
    assert_allclose(rep.psnr_star, rep.psnr)


def test_image_report_below_ssim_window(caplog):
    x = np.random.default_rng(13).uniform(size=(8, 8, 3))
    rep = image_report(x, x)
    assert rep.psnr == 100.0
    assert math.isnan(rep.ssim)
    assert "SSIM window" in caplog.text
