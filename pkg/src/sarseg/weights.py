"""Named parameter tensors and the WTS binary weight format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Iterator, Optional, Tuple

import numpy as np

WTS_MAGIC = b"WTS1"


@dataclass
class WeightStore:
    """Ordered (name -> float32 tensor) mapping; names unique by construction."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list:
        return list(self.tensors)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def total_scalars(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> Dict[str, np.ndarray]:
        return {k: v.astype(dtype) for k, v in self.tensors.items()}


def zeros_like_store(w: WeightStore, dtype=np.float32) -> Dict[str, np.ndarray]:
    return {k: np.zeros(v.shape, dtype=dtype) for k, v in w.items()}


def check_congruent(w: WeightStore, grads: Dict[str, np.ndarray]) -> None:
    if set(grads) != set(w.tensors):
        missing = set(w.tensors) ^ set(grads)
        raise ValueError(f"gradient names mismatch parameters: {sorted(missing)}")
    for name, t in w.items():
        if grads[name].shape != t.shape:
            raise ValueError(f"tensor {name!r}: gradient shape {grads[name].shape} != {t.shape}")


def save_wts_stream(w: WeightStore, stream: BinaryIO) -> None:
    stream.write(WTS_MAGIC)
    stream.write(struct.pack("<I", len(w)))
    for name, t in w.items():
        raw = name.encode("utf-8")
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<B", t.ndim))
        stream.write(struct.pack(f"<{t.ndim}I", *t.shape))
        stream.write(np.ascontiguousarray(t.astype("<f4")).tobytes())


def save_wts(w: WeightStore, path) -> None:
    with open(path, "wb") as f:
        save_wts_stream(w, f)


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    b = stream.read(n)
    if len(b) != n:
        raise ValueError(f"truncated weight file while reading {what}")
    return b


def load_wts_stream(stream: BinaryIO,
                    expected_shapes: Optional[Dict[str, tuple]] = None) -> WeightStore:
    magic = _read_exact(stream, 4, "magic")
    if magic != WTS_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {WTS_MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4, "tensor count"))
    store = WeightStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(stream, 2, "name length"))
        name = _read_exact(stream, nlen, "name").decode("utf-8")
        if name in store:
            raise ValueError(f"duplicate tensor {name!r}")
        (rank,) = struct.unpack("<B", _read_exact(stream, 1, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims)) if rank else 1
        payload = _read_exact(stream, 4 * n, f"payload of {name!r}")
        store[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if expected_shapes is not None:
        _validate_shapes(store, expected_shapes)
    return store


def _validate_shapes(store: WeightStore, expected: Dict[str, tuple]) -> None:
    for name, shape in expected.items():
        if name not in store:
            raise ValueError(f"tensor {name!r} missing from weight file")
        got = store[name].shape
        if len(got) != len(shape):
            raise ValueError(f"tensor {name!r}: rank {len(got)} != expected {len(shape)}")
        if got != tuple(shape):
            raise ValueError(f"tensor {name!r}: shape {got} != expected {tuple(shape)}")
    extra = set(store.names()) - set(expected)
    if extra:
        raise ValueError(f"unexpected tensors in weight file: {sorted(extra)}")


def load_wts(path, expected_shapes: Optional[Dict[str, tuple]] = None) -> WeightStore:
    with open(path, "rb") as f:
        return load_wts_stream(f, expected_shapes)
