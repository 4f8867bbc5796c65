import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from evbilevel.events import NOISE, SIGNAL, EventStream, rasterize_counts
from evbilevel.sim import (
    PATTERNS,
    SceneSequence,
    SimConfig,
    degrade_low_light,
    inject_ba_noise,
    load_dataset,
    make_dataset,
    make_scene,
    moving_edge_demo,
    rate_for_noise_fraction,
    save_dataset,
    simulate_events,
)

from oracles import simulate_loop

EPS = 0.15
FLOOR = 1e-3


def _gray_scene(values, ts=None):
    """Frames of a single gray pixel per entry of ``values`` (shape (F, H, W))."""
    values = np.asarray(values, dtype=float)
    frames = np.repeat(values[..., None], 3, axis=-1)
    if ts is None:
        ts = np.arange(len(values)) * 10_000
    return SceneSequence(frames, ts)


def _tuples(stream):
    return sorted(zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()))


def test_constant_scene_emits_nothing():
    scene = _gray_scene(np.full((5, 6, 6), 0.4))
    assert len(simulate_events(scene)) == 0


def test_two_and_a_half_thresholds_give_two_events():
    lo = 0.2
    hi = math.exp(math.log(lo + FLOOR) + 2.5 * EPS) - FLOOR
    s = simulate_events(_gray_scene([[[lo]], [[hi]]]))
    assert len(s) == 2
    assert_array_equal(s.p, [1, 1])
    # crossing levels 1/2.5 and 2/2.5 of the way through a 10 ms interval
    assert_array_equal(s.t, [4000, 8000])


def test_reference_advances_by_quantized_amount():
    # +1.5 thresholds then +0.6: the leftover half threshold fires on the second step
    lo = 0.1
    l0 = math.log(lo + FLOOR)
    v1 = math.exp(l0 + 1.5 * EPS) - FLOOR
    v2 = math.exp(l0 + 2.1 * EPS) - FLOOR
    s = simulate_events(_gray_scene([[[lo]], [[v1]], [[v2]]]))
    assert len(s) == 2
    assert s.t[1] >= 10_000


def test_matches_scalar_oracle_on_random_scenes():
    rng = np.random.default_rng(0)
    for _ in range(5):
        frames = rng.uniform(0, 1, size=(4, 5, 6, 3))
        ts = np.cumsum(rng.integers(100, 5000, size=4))
        scene = SceneSequence(frames, ts)
        assert _tuples(simulate_events(scene)) == simulate_loop(frames, ts, EPS, FLOOR)


def test_reversed_two_frame_scene_flips_polarities():
    rng = np.random.default_rng(1)
    frames = rng.uniform(0, 1, size=(2, 8, 8))
    fwd = simulate_events(_gray_scene(frames))
    bwd = simulate_events(_gray_scene(frames[::-1]))
    c_fwd = rasterize_counts(fwd, 0, 20_000)
    c_bwd = rasterize_counts(bwd, 0, 20_000)
    assert_array_equal(c_fwd, c_bwd[..., ::-1])


def test_no_event_below_threshold():
    rng = np.random.default_rng(2)
    frames = rng.uniform(0, 1, size=(2, 8, 8))
    logs = np.log(frames + FLOOR)
    s = simulate_events(_gray_scene(frames))
    counts = rasterize_counts(s, 0, 20_000).sum(axis=-1)
    assert_array_equal(counts, np.floor(np.abs(logs[1] - logs[0]) / EPS))


def test_out_of_range_intensity_rejected():
    with pytest.raises(ValueError):
        simulate_events(_gray_scene([[[0.2]], [[1.2]]]))


def test_timestamps_stay_in_frame_interval():
    sample = make_scene(0, SimConfig(ba_rate=0))
    ts = sample.timestamps
    assert sample.events.t.min() >= ts[0]
    assert sample.events.t.max() < ts[-1]


# Background activity.


def test_zero_rate_leaves_stream_unchanged():
    s = simulate_events(_gray_scene(np.random.default_rng(3).uniform(size=(2, 4, 4))))
    assert inject_ba_noise(s, SimConfig(ba_rate=0)) is s


def test_ba_count_mean_over_1000_seeds():
    empty = EventStream(16, 16, label=np.zeros(0, np.int8))
    cfg = SimConfig(ba_rate=1.0)
    counts = [
        len(inject_ba_noise(empty, cfg, span=(0, 1_000_000), rng=np.random.default_rng(seed))) for seed in range(1000)
    ]
    expected = 256.0
    assert abs(np.mean(counts) - expected) <= 4 * math.sqrt(expected)


def test_ba_noise_is_uniform_and_balanced():
    empty = EventStream(8, 8, label=np.zeros(0, np.int8))
    s = inject_ba_noise(empty, SimConfig(ba_rate=2000.0), span=(0, 1_000_000), rng=np.random.default_rng(4))
    n = len(s)
    assert np.all(s.label == NOISE)
    # positive share within 4 sigma of one half
    assert abs(np.mean(s.p > 0) - 0.5) < 4 * 0.5 / math.sqrt(n)
    assert abs(np.mean(s.x) - 3.5) < 4 * math.sqrt(63 / 12 / n)


def test_same_seed_same_noise():
    base = simulate_events(_gray_scene(np.random.default_rng(5).uniform(size=(3, 6, 6))))
    a = inject_ba_noise(base, SimConfig(ba_rate=500), rng=np.random.default_rng(9))
    b = inject_ba_noise(base, SimConfig(ba_rate=500), rng=np.random.default_rng(9))
    assert a.equals(b)


def test_signal_subset_equals_clean_stream():
    rng = np.random.default_rng(6)
    clean = simulate_events(_gray_scene(rng.uniform(size=(4, 8, 8))))
    noisy = inject_ba_noise(clean, SimConfig(ba_rate=3000), rng=rng)
    assert len(noisy) > len(clean)
    assert noisy.only(SIGNAL).equals(clean)


def test_rate_for_noise_fraction():
    rate = rate_for_noise_fraction(100, 0.5, 10, 10, 1_000_000)
    assert rate == pytest.approx(1.0)


# Low-light degradation.


def test_unit_gain_without_noise_is_identity():
    x = np.random.default_rng(7).uniform(size=(4, 4, 3))
    cfg = SimConfig(gain=1.0, shot_noise=0.0, read_noise=0.0)
    assert_array_equal(degrade_low_light(x, cfg, seed=0), x)


def test_gain_without_noise_scales():
    x = np.random.default_rng(8).uniform(size=(4, 4, 3))
    cfg = SimConfig(gain=0.1, shot_noise=0.0, read_noise=0.0)
    assert_allclose(degrade_low_light(x, cfg, seed=0), 0.1 * x, rtol=0, atol=1e-17)


def test_noisy_mean_of_constant_frame():
    cfg = SimConfig(gain=0.1)
    y = degrade_low_light(np.full((100, 100, 1), 0.5), cfg, seed=3).ravel()
    sigma = math.sqrt(cfg.shot_noise * 0.05 + cfg.read_noise**2)
    assert abs(y.mean() - 0.05) < 3 * sigma / math.sqrt(y.size)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(contrast_threshold=0)
    with pytest.raises(ValueError):
        SimConfig(gain=0)
    with pytest.raises(ValueError):
        SimConfig(ba_rate=-1)
    with pytest.raises(ValueError):
        SimConfig(patterns=("spiral",))


# Datasets.


def test_empty_dataset():
    assert make_dataset(0) == []


def test_dataset_is_deterministic():
    cfg = SimConfig(resolution=16)
    a, b = make_dataset(4, cfg), make_dataset(4, cfg)
    for sa, sb in zip(a, b):
        assert sa.events.equals(sb.events)
        assert_array_equal(sa.x_low, sb.x_low)
        assert_array_equal(sa.x_high, sb.x_high)


def test_every_pattern_moves_and_emits_events():
    cfg = SimConfig(resolution=16, ba_rate=0)
    for i, pattern in enumerate(PATTERNS):
        sample = make_scene(i, cfg, pattern=pattern)
        assert len(sample.events.only(SIGNAL)) > 0, pattern


def test_seed_changes_scenes():
    a = make_scene(0, SimConfig(resolution=16, seed=0))
    b = make_scene(0, SimConfig(resolution=16, seed=1))
    assert not np.array_equal(a.x_high, b.x_high)


def test_demo_scene_noise_fraction():
    demo = moving_edge_demo()
    t0, t1 = demo.window
    win = demo.events.window(t0, t1)
    frac = np.mean(win.label == NOISE)
    # half the window's events are noise in expectation; Poisson spread on ~30 counts
    assert 0.3 < frac < 0.7
    assert demo.extra["ba_rate"] > 0


def test_save_load_dataset(tmp_path):
    cfg = SimConfig(resolution=8)
    samples = make_dataset(3, cfg)
    save_dataset(samples, tmp_path, cfg, ["train", "train", "test"])
    back = load_dataset(tmp_path)
    assert [s.name for s in back] == [s.name for s in samples]
    assert [s.name for s in load_dataset(tmp_path, "test")] == [samples[2].name]
    for a, b in zip(samples, back):
        assert a.events.equals(b.events)
        assert_allclose(a.x_high, b.x_high, atol=0.5 / 65535 + 1e-12)
        assert_array_equal(a.timestamps, b.timestamps)


def test_save_dataset_needs_matching_splits(tmp_path):
    with pytest.raises(ValueError):
        save_dataset(make_dataset(2, SimConfig(resolution=8)), tmp_path, SimConfig(), ["train"])


def test_config_round_trips_through_dict():
    cfg = SimConfig(resolution=12, patterns=("checkerboard",))
    assert SimConfig(**cfg.to_dict()) == cfg
    assert replace(cfg, seed=3).seed == 3
