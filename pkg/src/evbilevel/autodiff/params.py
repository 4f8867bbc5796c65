"""Named parameter collections and their binary checkpoint format."""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"BEVL"
FORMAT_VERSION = 1


class ParamFormatError(ValueError):
    pass


class ParamSet(Mapping):
    """Ordered mapping from parameter name to float64 array.

    Iteration order is insertion order, which makes :meth:`flatten` and
    the serialized layout deterministic.
    """

    def __init__(self, items=None):
        self._data: dict[str, np.ndarray] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for name, value in pairs:
                self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {v.shape}" for k, v in self._data.items())
        return f"ParamSet({body})"

    @property
    def size(self) -> int:
        return sum(v.size for v in self._data.values())

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._data.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(self._data)

    def flatten(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._data.values()])

    def unflatten(self, vector) -> "ParamSet":
        """Inverse of :meth:`flatten` using this set's names and shapes."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {vector.shape}")
        out, offset = [], 0
        for name, value in self._data.items():
            out.append((name, vector[offset : offset + value.size].reshape(value.shape)))
            offset += value.size
        return ParamSet(out)

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet((k, v) for k, v in self._data.items() if k.startswith(prefix))

    def merged(self, other: Mapping) -> "ParamSet":
        clash = set(self._data) & set(other)
        if clash:
            raise ValueError(f"parameter names collide: {sorted(clash)}")
        return ParamSet(list(self._data.items()) + list(other.items()))

    def axpy(self, alpha: float, direction: Mapping) -> "ParamSet":
        """Return ``self + alpha * direction`` entrywise."""
        return ParamSet((k, v + alpha * direction[k]) for k, v in self._data.items())

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self._data.values())))

    def equals(self, other: "ParamSet") -> bool:
        """Exact equality of names, order, shapes and bit patterns."""
        if list(self) != list(other):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._data.values(), other.values())
        )


def zeros_like(params: Mapping) -> ParamSet:
    return ParamSet((k, np.zeros_like(v)) for k, v in params.items())


def to_bytes(params: Mapping) -> bytes:
    chunks = [MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<Q", len(params))]
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.astype("<f8").tobytes())
    return b"".join(chunks)


def from_bytes(blob: bytes) -> ParamSet:
    if blob[:4] != MAGIC:
        raise ParamFormatError("bad magic; not a BEVL parameter file")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != FORMAT_VERSION:
        raise ParamFormatError(f"unsupported BEVL version {version}")
    offset = 5
    try:
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        items = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            n = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            offset += 8 * n
            items.append((name, values.reshape(shape).astype(np.float64)))
    except (struct.error, ValueError) as err:
        raise ParamFormatError(f"truncated or corrupt BEVL file: {err}") from None
    if offset != len(blob):
        raise ParamFormatError(f"{len(blob) - offset} trailing bytes after last entry")
    return ParamSet(items)


def save_params(params: Mapping, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_params(path) -> ParamSet:
    return from_bytes(Path(path).read_bytes())
