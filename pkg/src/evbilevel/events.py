"""Event streams, the evtxt file format, and dense rasterizations.

An :class:`EventStream` stores events column-wise in numpy arrays, sorted
by ``(t, y, x, polarity)``. Labels are optional: ``SIGNAL``, ``NOISE``
or ``UNLABELED`` per event.

evtxt v1::

    # evtxt v1 W H
    t x y p

evtxt v2 adds a fifth column ``s`` or ``n`` (signal / noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGNAL = 1
NOISE = 0
UNLABELED = -1

# Polarity-map classes, in the order used by the denoiser logits.
POSITIVE = 0
NEGATIVE = 1
NONE = 2
N_CLASSES = 3

COUNT_CLIP = 255


class EventFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EventStream:
    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    label: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p, dtype=np.int8).reshape(-1)
        n = t.size
        if not (x.size == y.size == p.size == n):
            raise ValueError("event columns have different lengths")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"invalid sensor geometry {self.width}x{self.height}")
        if n:
            if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
                raise ValueError(f"event coordinates outside {self.width}x{self.height} sensor")
            if not np.all((p == 1) | (p == -1)):
                raise ValueError("polarity must be +1 or -1")
            if t.min() < 0:
                raise ValueError("timestamps must be non-negative")
        label = None
        if self.label is not None:
            label = np.asarray(self.label, dtype=np.int8).reshape(-1)
            if label.size != n:
                raise ValueError("label column has the wrong length")
        cols = {"t": t, "x": x, "y": y, "p": p, "label": label}
        for name, arr in cols.items():
            if arr is not None:
                arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def labeled(self) -> bool:
        return self.label is not None and bool(np.all(self.label != UNLABELED))

    def sorted(self) -> "EventStream":
        """Stable sort by (t, y, x, polarity, label)."""
        keys = [self.p, self.x, self.y, self.t]
        if self.label is not None:
            keys.insert(0, self.label)
        order = np.lexsort(keys)
        return self.take(order)

    def is_sorted(self) -> bool:
        return len(self) < 2 or bool(np.all(np.diff(self.t) >= 0))

    def take(self, index) -> "EventStream":
        return EventStream(
            self.width,
            self.height,
            self.t[index],
            self.x[index],
            self.y[index],
            self.p[index],
            None if self.label is None else self.label[index],
        )

    def window(self, t0: int, t1: int) -> "EventStream":
        keep = (self.t >= t0) & (self.t < t1)
        return self.take(np.flatnonzero(keep))

    def only(self, label: int) -> "EventStream":
        if self.label is None:
            raise ValueError("stream carries no labels")
        return self.take(np.flatnonzero(self.label == label))

    def with_polarity_flipped(self) -> "EventStream":
        return EventStream(self.width, self.height, self.t, self.x, self.y, -self.p, self.label)

    def equals(self, other: "EventStream") -> bool:
        same_labels = (self.label is None and other.label is None) or (
            self.label is not None and other.label is not None and np.array_equal(self.label, other.label)
        )
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
            and same_labels
        )

    @classmethod
    def concatenate(cls, streams: list["EventStream"]) -> "EventStream":
        first = streams[0]
        labels = [s.label for s in streams]
        if any(lab is None for lab in labels):
            label = None if all(lab is None for lab in labels) else np.concatenate(
                [np.full(len(s), UNLABELED, np.int8) if s.label is None else s.label for s in streams]
            )
        else:
            label = np.concatenate(labels)
        return cls(
            first.width,
            first.height,
            np.concatenate([s.t for s in streams]),
            np.concatenate([s.x for s in streams]),
            np.concatenate([s.y for s in streams]),
            np.concatenate([s.p for s in streams]),
            label,
        )


def save_events(stream: EventStream, path, *, with_labels: bool | None = None) -> None:
    """Write ``stream`` as evtxt; v2 (with labels) when the stream is labeled."""
    if with_labels is None:
        with_labels = stream.labeled
    version = "v2" if with_labels else "v1"
    lines = [f"# evtxt {version} {stream.width} {stream.height}"]
    if with_labels:
        if not stream.labeled:
            raise ValueError("cannot write evtxt v2 for a stream with unlabeled events")
        tags = np.where(stream.label == SIGNAL, "s", "n")
        for t, x, y, p, tag in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist(), tags):
            lines.append(f"{t} {x} {y} {p} {tag}")
    else:
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            lines.append(f"{t} {x} {y} {p}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_events(path) -> EventStream:
    text = Path(path).read_text(encoding="utf-8")
    return parse_events(text)


def parse_events(text: str) -> EventStream:
    lines = text.splitlines()
    if not lines:
        raise EventFormatError("line 1: missing evtxt header")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "#" or head[1] != "evtxt" or head[2] not in ("v1", "v2"):
        raise EventFormatError(f"line 1: bad header {lines[0]!r}")
    try:
        width, height = int(head[3]), int(head[4])
    except ValueError:
        raise EventFormatError(f"line 1: bad geometry in header {lines[0]!r}") from None
    if width <= 0 or height <= 0:
        raise EventFormatError(f"line 1: non-positive geometry {width}x{height}")
    ncols = 5 if head[2] == "v2" else 4
    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != ncols:
            raise EventFormatError(f"line {lineno}: expected {ncols} fields, got {line!r}")
        try:
            t, x, y, p = (int(v) for v in parts[:4])
        except ValueError:
            raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from None
        if p not in (1, -1):
            raise EventFormatError(f"line {lineno}: polarity must be 1 or -1, got {p}")
        if t < 0:
            raise EventFormatError(f"line {lineno}: negative timestamp {t}")
        if not (0 <= x < width and 0 <= y < height):
            raise EventFormatError(f"line {lineno}: coordinates ({x}, {y}) outside {width}x{height}")
        if ncols == 5:
            if parts[4] not in ("s", "n"):
                raise EventFormatError(f"line {lineno}: label must be 's' or 'n', got {parts[4]!r}")
            labels.append(SIGNAL if parts[4] == "s" else NOISE)
        rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    stream = EventStream(
        width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], np.array(labels, np.int8) if ncols == 5 else None
    )
    return stream.sorted()


def rasterize_counts(stream: EventStream, t0: int, t1: int) -> np.ndarray:
    """Per-pixel (positive, negative) counts for ``t0 <= t < t1``; shape (H, W, 2)."""
    if not t0 < t1:
        raise ValueError(f"empty or inverted window [{t0}, {t1})")
    counts = np.zeros((stream.height, stream.width, 2), dtype=np.int64)
    keep = (stream.t >= t0) & (stream.t < t1)
    ys, xs, ps = stream.y[keep], stream.x[keep], stream.p[keep]
    np.add.at(counts, (ys, xs, (ps < 0).astype(np.int64)), 1)
    return counts


def last_polarity(stream: EventStream, t0: int, t1: int) -> np.ndarray:
    """Polarity of the temporally last in-window event per pixel (0 where none)."""
    out = np.zeros((stream.height, stream.width), dtype=np.int8)
    keep = np.flatnonzero((stream.t >= t0) & (stream.t < t1))
    # later events overwrite earlier ones because fancy assignment keeps the last write
    out[stream.y[keep], stream.x[keep]] = stream.p[keep]
    return out


def to_polarity_map(counts: np.ndarray, last: np.ndarray | None = None) -> np.ndarray:
    """Three-class map: majority polarity, NONE where no events.

    Exact ties resolve to the polarity of the last event when ``last`` is
    given, else to POSITIVE.
    """
    pos, neg = counts[..., 0], counts[..., 1]
    classes = np.full(pos.shape, NONE, dtype=np.int8)
    classes[pos > neg] = POSITIVE
    classes[neg > pos] = NEGATIVE
    tie = (pos == neg) & (pos > 0)
    if last is None:
        classes[tie] = POSITIVE
    else:
        classes[tie & (last < 0)] = NEGATIVE
        classes[tie & (last >= 0)] = POSITIVE
    return classes


def polarity_map(stream: EventStream, t0: int, t1: int) -> np.ndarray:
    """:func:`to_polarity_map` with the stream-aware tie rule."""
    return to_polarity_map(rasterize_counts(stream, t0, t1), last_polarity(stream, t0, t1))


def log_increment(stream: EventStream, t: int, dt: int, contrast_threshold: float) -> np.ndarray:
    """Log-intensity change accumulated over ``[t - dt, t)``, shape (H, W)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    counts = rasterize_counts(stream, t - dt, t)
    return contrast_threshold * (counts[..., 0] - counts[..., 1]).astype(np.float64)


def counts_to_input(counts: np.ndarray) -> np.ndarray:
    """Network input: clip counts at 255, scale to [0, 1], channels first."""
    scaled = np.minimum(counts, COUNT_CLIP).astype(np.float64) / COUNT_CLIP
    return np.moveaxis(scaled, -1, 0)
