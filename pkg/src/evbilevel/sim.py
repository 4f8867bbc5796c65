"""Synthetic paired data: moving scenes, labeled events, BA noise, low light.

Events follow the log-intensity trigger model: each pixel keeps a
reference log intensity and emits ``floor(|delta| / threshold)`` events
whenever the change since the reference reaches the contrast threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .events import NOISE, SIGNAL, EventStream, load_events, save_events
from .imageio import read_pnm, write_pnm
from .retinex import LUMA

PATTERNS = ("moving_edge", "checkerboard", "textured_square", "gradient_ramp")


@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.15
    log_floor: float = 1e-3
    ba_rate: float = 50.0  # noise events per pixel per second
    gain: float = 0.2
    shot_noise: float = 0.01
    read_noise: float = 0.005
    seed: int = 0
    resolution: int = 32
    n_frames: int = 5
    frame_interval_us: int = 10_000
    speed_px_s: float = 100.0
    patterns: tuple = PATTERNS

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.ba_rate < 0:
            raise ValueError("ba_rate must be non-negative")
        if not 0 < self.gain <= 1:
            raise ValueError("gain must lie in (0, 1]")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        unknown = set(self.patterns) - set(PATTERNS)
        if unknown:
            raise ValueError(f"unknown patterns {sorted(unknown)}")
        object.__setattr__(self, "patterns", tuple(self.patterns))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patterns"] = list(self.patterns)
        return d


@dataclass(frozen=True)
class SceneSequence:
    frames: np.ndarray  # (F, H, W, 3) in [0, 1]
    timestamps: np.ndarray  # (F,) microseconds, strictly increasing
    pattern: str = "custom"
    velocity: float = 0.0  # px/s

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be (F, H, W, 3), got {frames.shape}")
        if frames.shape[0] < 2 or ts.shape != (frames.shape[0],):
            raise ValueError("need at least two frames with one timestamp each")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def simulate_events(scene: SceneSequence, cfg: SimConfig = SimConfig()) -> EventStream:
    """Noise-free events for ``scene``, all labeled SIGNAL.

    Emission times are interpolated linearly in log intensity between the
    two frames bracketing each threshold crossing, and kept inside
    ``[t_prev, t_next)``.
    """
    frames = scene.frames
    if frames.min() < 0 or frames.max() > 1:
        raise ValueError("scene intensities must lie in [0, 1]")
    eps = cfg.contrast_threshold
    log_i = np.log(frames @ LUMA + cfg.log_floor)
    ref = log_i[0].copy()
    h, w = ref.shape
    ys, xs = np.mgrid[0:h, 0:w]
    chunks = []
    for f in range(1, len(frames)):
        t_prev, t_next = int(scene.timestamps[f - 1]), int(scene.timestamps[f])
        prev, new = log_i[f - 1], log_i[f]
        delta = new - ref
        n = np.floor(np.abs(delta) / eps).astype(np.int64)
        hit = n > 0
        if not hit.any():
            continue
        sign = np.sign(delta[hit])
        counts = n[hit]
        k = np.concatenate([np.arange(1, c + 1) for c in counts])
        rep = np.repeat(np.arange(counts.size), counts)
        level = ref[hit][rep] + k * eps * sign[rep]
        span = (new - prev)[hit][rep]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(span != 0, (level - prev[hit][rep]) / span, 1.0)
        frac = np.clip(frac, 0.0, 1.0)
        t = t_prev + np.floor(frac * (t_next - t_prev)).astype(np.int64)
        t = np.minimum(t, t_next - 1)
        chunks.append((t, xs[hit][rep], ys[hit][rep], sign[rep].astype(np.int8)))
        ref[hit] += counts * eps * sign
    if not chunks:
        return EventStream(w, h, label=np.zeros(0, np.int8))
    t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    return EventStream(w, h, t, x, y, p, np.full(t.size, SIGNAL, np.int8)).sorted()


def inject_ba_noise(
    stream: EventStream,
    cfg: SimConfig = SimConfig(),
    *,
    span: tuple[int, int] | None = None,
    rng: np.random.Generator | None = None,
) -> EventStream:
    """Add Poisson background-activity events uniformly over space and ``span``.

    ``span`` defaults to the stream's own time range. Existing events are
    labeled SIGNAL if they carry no labels.
    """
    if cfg.ba_rate == 0:
        return stream
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if span is None:
        if len(stream) == 0:
            return stream
        span = (int(stream.t.min()), int(stream.t.max()) + 1)
    t0, t1 = span
    h, w = stream.height, stream.width
    n = rng.poisson(cfg.ba_rate * h * w * (t1 - t0) * 1e-6)
    noise = EventStream(
        w,
        h,
        rng.integers(t0, t1, size=n),
        rng.integers(0, w, size=n),
        rng.integers(0, h, size=n),
        np.where(rng.random(n) < 0.5, 1, -1),
        np.full(n, NOISE, np.int8),
    )
    base = stream if stream.label is not None else EventStream(
        w, h, stream.t, stream.x, stream.y, stream.p, np.full(len(stream), SIGNAL, np.int8)
    )
    return EventStream.concatenate([base, noise]).sorted()


def degrade_low_light(frame: np.ndarray, cfg: SimConfig = SimConfig(), seed: int | None = None) -> np.ndarray:
    """Scale by the gain and add signal-dependent shot noise plus read noise."""
    frame = np.asarray(frame, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    scaled = cfg.gain * frame
    n1 = rng.standard_normal(frame.shape)
    n2 = rng.standard_normal(frame.shape)
    return np.clip(scaled + np.sqrt(cfg.shot_noise * scaled) * n1 + cfg.read_noise * n2, 0.0, 1.0)


def rate_for_noise_fraction(n_signal: int, fraction: float, height: int, width: int, duration_us: int) -> float:
    """BA rate whose expected count makes ``fraction`` of all events noise."""
    expected_noise = n_signal * fraction / (1.0 - fraction)
    return expected_noise / (height * width * duration_us * 1e-6)


# Scene rendering ------------------------------------------------------------

_SUPERSAMPLE = 4


def _render(fn, h: int, w: int, shift: float) -> np.ndarray:
    """Box-filtered rendering of ``fn(x, y) -> rgb`` translated right by ``shift``."""
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    gx, gy = np.meshgrid(xs - shift, ys)
    img = fn(gx, gy)  # (h*S, w*S, 3)
    return img.reshape(h, _SUPERSAMPLE, w, _SUPERSAMPLE, 3).mean(axis=(1, 3))


def _pattern_fn(pattern: str, rng: np.random.Generator, size: int):
    fg = rng.uniform(0.5, 1.0, size=3)
    bg = rng.uniform(0.0, 0.15, size=3)
    if pattern == "moving_edge":
        edge = size * rng.uniform(0.3, 0.5)

        def fn(x, y):
            return np.where((x < edge)[..., None], fg, bg)

    elif pattern == "checkerboard":
        block = int(rng.choice([6, 8]))

        def fn(x, y):
            odd = (np.floor(x / block) + np.floor(y / block)) % 2 == 1
            return np.where(odd[..., None], fg, bg)

    elif pattern == "textured_square":
        side = size * rng.uniform(0.35, 0.5)
        x0, y0 = size * rng.uniform(0.1, 0.3), size * rng.uniform(0.2, 0.4)
        freq = rng.uniform(0.4, 0.9, size=2)

        def fn(x, y):
            inside = (x >= x0) & (x < x0 + side) & (y >= y0) & (y < y0 + side)
            texture = 0.75 + 0.25 * np.sin(freq[0] * x) * np.cos(freq[1] * y)
            return np.where(inside[..., None], fg * texture[..., None], bg)

    elif pattern == "gradient_ramp":
        period = size * rng.uniform(0.6, 1.0)

        def fn(x, y):
            ramp = (x % period) / period
            return bg + (fg - bg) * ramp[..., None]

    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return fn


def render_scene(pattern: str, cfg: SimConfig, rng: np.random.Generator) -> SceneSequence:
    size = cfg.resolution
    fn = _pattern_fn(pattern, rng, size)
    ts = np.arange(cfg.n_frames, dtype=np.int64) * cfg.frame_interval_us
    shifts = cfg.speed_px_s * ts * 1e-6
    frames = np.stack([_render(fn, size, size, s) for s in shifts])
    return SceneSequence(np.clip(frames, 0.0, 1.0), ts, pattern, cfg.speed_px_s)


@dataclass
class SceneSample:
    """One training/evaluation item.

    ``x_low``/``x_high`` hold every frame; the networks use the last one.
    ``window`` is the event window ending at the last frame.
    """

    name: str
    pattern: str
    x_low: np.ndarray  # (F, H, W, 3)
    x_high: np.ndarray  # (F, H, W, 3)
    events: EventStream  # labeled, noisy
    timestamps: np.ndarray
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def window(self) -> tuple[int, int]:
        return int(self.timestamps[-2]), int(self.timestamps[-1])

    @property
    def low(self) -> np.ndarray:
        return self.x_low[-1]

    @property
    def high(self) -> np.ndarray:
        return self.x_high[-1]


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def make_scene(index: int, cfg: SimConfig, pattern: str | None = None, name: str | None = None) -> SceneSample:
    seed = scene_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    if pattern is None:
        pattern = cfg.patterns[index % len(cfg.patterns)]
    scene = render_scene(pattern, cfg, rng)
    clean = simulate_events(scene, cfg)
    span = (int(scene.timestamps[0]), int(scene.timestamps[-1]))
    noisy = inject_ba_noise(clean, cfg, span=span, rng=rng)
    if noisy.label is None:
        noisy = EventStream(
            clean.width, clean.height, clean.t, clean.x, clean.y, clean.p, np.full(len(clean), SIGNAL, np.int8)
        )
    low_seed = int(rng.integers(0, 2**31 - 1))
    x_low = np.stack([degrade_low_light(f, cfg, seed=low_seed + i) for i, f in enumerate(scene.frames)])
    return SceneSample(
        name or f"scene_{index:03d}", pattern, x_low, scene.frames, noisy, scene.timestamps, seed
    )


def make_dataset(n_scenes: int, cfg: SimConfig = SimConfig(), offset: int = 0) -> list[SceneSample]:
    """``n_scenes`` scenes cycling through ``cfg.patterns``; deterministic in ``cfg.seed``."""
    return [make_scene(offset + i, cfg) for i in range(n_scenes)]


def moving_edge_demo(noise_fraction: float = 0.5, cfg: SimConfig | None = None) -> SceneSample:
    """The bundled 32x32 moving-edge scene.

    A bright vertical half-plane over a black background moves right by one
    pixel per frame. The BA rate is set so that ``noise_fraction`` of the
    events in the last frame interval are expected to be noise.
    """
    cfg = cfg or SimConfig(seed=7)
    size, fg = cfg.resolution, np.full(3, 0.8)
    ts = np.arange(cfg.n_frames, dtype=np.int64) * cfg.frame_interval_us
    frames = np.zeros((cfg.n_frames, size, size, 3))
    for f in range(cfg.n_frames):
        frames[f, :, : size // 2 + f] = fg
    scene = SceneSequence(frames, ts, "moving_edge", 1e6 / cfg.frame_interval_us)
    clean = simulate_events(scene, cfg)
    window = (int(ts[-2]), int(ts[-1]))
    n_signal = len(clean.window(*window))
    rate = rate_for_noise_fraction(n_signal, noise_fraction, size, size, window[1] - window[0])
    cfg = replace(cfg, ba_rate=rate)
    rng = np.random.default_rng(cfg.seed)
    noisy = inject_ba_noise(clean, cfg, span=(int(ts[0]), int(ts[-1])), rng=rng)
    x_low = np.stack([degrade_low_light(f, cfg, seed=cfg.seed + i) for i, f in enumerate(frames)])
    return SceneSample("moving_edge_demo", "moving_edge", x_low, frames, noisy, ts, cfg.seed, {"ba_rate": rate})


# On-disk layout -------------------------------------------------------------


def save_scene(sample: SceneSample, directory, cfg: SimConfig, split: str = "train") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (lo, hi) in enumerate(zip(sample.x_low, sample.x_high)):
        write_pnm(d / f"low_{i:02d}.ppm", lo)
        write_pnm(d / f"high_{i:02d}.ppm", hi)
    save_events(sample.events, d / "events.evtxt", with_labels=True)
    manifest = {
        "name": sample.name,
        "pattern": sample.pattern,
        "split": split,
        "width": sample.events.width,
        "height": sample.events.height,
        "timestamps": [int(t) for t in sample.timestamps],
        "seed": sample.seed,
        "n_events": len(sample.events),
        "config": cfg.to_dict(),
        **sample.extra,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_scene(directory) -> SceneSample:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    n = len(manifest["timestamps"])
    x_low = np.stack([read_pnm(d / f"low_{i:02d}.ppm") for i in range(n)])
    x_high = np.stack([read_pnm(d / f"high_{i:02d}.ppm") for i in range(n)])
    events = load_events(d / "events.evtxt")
    return SceneSample(
        manifest["name"],
        manifest["pattern"],
        x_low,
        x_high,
        events,
        np.array(manifest["timestamps"], dtype=np.int64),
        manifest.get("seed", 0),
        {"split": manifest.get("split", "train")},
    )


def load_dataset(root, split: str | None = None) -> list[SceneSample]:
    root = Path(root)
    index = json.loads((root / "manifest.json").read_text())
    scenes = [load_scene(root / entry["dir"]) for entry in index["scenes"] if split is None or entry["split"] == split]
    return scenes


def save_dataset(samples: list[SceneSample], root, cfg: SimConfig, splits: list[str] | None = None) -> Path:
    """Write every scene under ``root/<name>`` plus a root manifest listing them."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = splits or ["train"] * len(samples)
    if len(splits) != len(samples):
        raise ValueError("one split name per scene required")
    for sample, split in zip(samples, splits):
        save_scene(sample, root / sample.name, cfg, split)
    index = {
        "config": cfg.to_dict(),
        "scenes": [{"dir": s.name, "split": sp} for s, sp in zip(samples, splits)],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path
