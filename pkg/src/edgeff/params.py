"""Path-addressable parameter store and the binary checkpoint format.

Checkpoint layout (all integers little-endian):

    byte 0          version (currently 1)
    uint32          number of entries
    per entry       uint32 path length, path bytes (utf-8),
                    uint32 ndim, ndim * uint32 extents
    payload         all values as float64, entry order, row-major

Values are always written at 64-bit so a checkpoint round-trips across run
precisions; loading casts to the requested precision.
"""

from __future__ import annotations

import struct
from typing import Iterator

import numpy as np

from .autodiff import Tensor

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class ParameterStore:
    """Ordered mapping of path -> leaf Tensor, with gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.gradients: dict[str, np.ndarray] = {}

    def add(self, path: str, values: np.ndarray) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.ascontiguousarray(values))
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def assign(self, path: str, values: np.ndarray) -> Tensor:
        """Rebind a path to a fresh tensor (tensors themselves stay immutable)."""
        if path not in self._params:
            raise KeyError(f"unknown parameter path {path!r}")
        t = Tensor(np.ascontiguousarray(values))
        self._params[path] = t
        return t

    def cast(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for path, t in self._params.items():
            out.add(path, t.data.astype(dtype))
        return out

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def save_checkpoint(path, store: ParameterStore) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(store)))
        for name, t in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> ParameterStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 5:
        raise CheckpointError("checkpoint truncated before header")
    version = blob[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 1)
    offset = 5
    entries: list[tuple[str, tuple[int, ...]]] = []
    try:
        for _ in range(count):
            (plen,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + plen].decode("utf-8")
            offset += plen
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            entries.append((name, shape))
    except struct.error as exc:
        raise CheckpointError("checkpoint truncated inside path table") from exc

    store = ParameterStore()
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated inside values of {name!r}")
        values = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
        store.add(name, values.astype(dtype))
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return store
