"""Binary PGM (P5) / PPM (P6) reading and writing with linear encoding."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pnm(path, image: np.ndarray, bits: int = 16) -> None:
    """Write a float image in [0, 1]; (H, W) gives P5, (H, W, 3) gives P6."""
    image = np.asarray(image, dtype=np.float64)
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {image.shape}")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = image.shape[:2]
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raw)


def _tokens(blob: bytes, count: int) -> tuple[list[int], int]:
    values, pos = [], 2
    while len(values) < count:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        values.append(int(blob[start:pos]))
    return values, pos + 1


def read_pnm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    (w, h, maxval), offset = _tokens(blob, 3)
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(blob, dtype=dtype, count=w * h * channels, offset=offset)
    image = data.astype(np.float64) / maxval
    return image.reshape(h, w, 3) if channels == 3 else image.reshape(h, w)
