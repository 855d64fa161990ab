"""Compact storage of found sub-path samples.

Each record takes 40 bytes: both endpoints as float32, the first chain
direction in 16-bit octahedral form, the chain length and type bits in one
16-bit code, the receiver BSDF value as float16 and the weight factors as
float32.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .._layout import N_MAX, REC_WIDTH

RECORD_DTYPE = np.dtype([
    ("x_d", "<f4", (3,)),
    ("x_l", "<f4", (3,)),
    ("dir", "<u2", (2,)),
    ("code", "<u2"),   # bit n marks the length, bits 0..n-1 the types, bit 15 the copy flag
    ("bsdf", "<f2"),
    ("throughput", "<f4"),
    ("recip", "<f4"),
])
assert RECORD_DTYPE.itemsize == 40

COPY_FLAG = 1 << 15
_F16_MAX = float(np.finfo(np.float16).max)


def oct_encode(d: np.ndarray) -> np.ndarray:
    """Unit vectors (..., 3) -> uint16 pairs (..., 2)."""
    d = np.asarray(d, dtype=np.float64)
    d = d / np.sum(np.abs(d), axis=-1, keepdims=True)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    neg = z < 0.0
    ox = np.where(neg, (1.0 - np.abs(y)) * np.where(x >= 0.0, 1.0, -1.0), x)
    oy = np.where(neg, (1.0 - np.abs(x)) * np.where(y >= 0.0, 1.0, -1.0), y)
    q = np.rint((np.stack([ox, oy], axis=-1) * 0.5 + 0.5) * 65535.0)
    return np.clip(q, 0, 65535).astype(np.uint16)


def oct_decode(q: np.ndarray) -> np.ndarray:
    f = np.asarray(q, dtype=np.float64) / 65535.0 * 2.0 - 1.0
    x, y = f[..., 0], f[..., 1]
    z = 1.0 - np.abs(x) - np.abs(y)
    t = np.maximum(-z, 0.0)
    x = x - np.where(x >= 0.0, t, -t)
    y = y - np.where(y >= 0.0, t, -t)
    v = np.stack([x, y, z], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def encode_code(n, bits, copy=False):
    n = np.asarray(n, dtype=np.int64)
    if np.any((n < 1) | (n > N_MAX)):
        raise ValueError("chain length out of range")
    code = (np.left_shift(1, n) | np.asarray(bits, dtype=np.int64))
    return (code | np.where(copy, COPY_FLAG, 0)).astype(np.uint16)


def decode_code(code):
    """uint16 codes -> (n, type bits, copy flag)."""
    c = np.asarray(code, dtype=np.int64)
    copy = (c & COPY_FLAG) != 0
    c = c & (COPY_FLAG - 1)
    n = np.zeros_like(c)
    for k in range(1, N_MAX + 1):
        n = np.where(c >> k == 1, k, n)
    bits = c & ((np.int64(1) << n) - 1)
    return n, bits, copy


def pack_rows(rows: np.ndarray) -> np.ndarray:
    """Kernel record rows (R, 14) of float64 -> structured RECORD_DTYPE array.

    Rows with non-positive throughput are rejected: such chains carry no
    information for the fit.
    """
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, REC_WIDTH)
    if np.any(rows[:, 11] <= 0.0):
        raise ValueError("sub-path samples must have positive throughput")
    out = np.zeros(len(rows), dtype=RECORD_DTYPE)
    out["x_d"] = rows[:, 0:3]
    out["x_l"] = rows[:, 3:6]
    out["dir"] = oct_encode(rows[:, 6:9]) if len(rows) else np.zeros((0, 2))
    out["code"] = encode_code(rows[:, 9].astype(np.int64), rows[:, 10].astype(np.int64))
    out["bsdf"] = np.clip(rows[:, 13], 0.0, _F16_MAX)
    out["throughput"] = rows[:, 11]
    out["recip"] = rows[:, 12]
    return out


@dataclass(frozen=True)
class SubPathSample:
    x_d: tuple
    x_l: tuple
    direction: tuple
    n: int
    bits: int
    throughput: float
    recip: float
    bsdf: float = 0.0
    copy: bool = False

    def __post_init__(self):
        if not self.throughput > 0.0:
            raise ValueError("zero-throughput chains are never recorded")
        if not self.recip >= 1.0:
            raise ValueError("reciprocal-probability estimate must be at least 1")
        if not 1 <= self.n <= N_MAX or self.bits >> self.n:
            raise ValueError("invalid chain length or type bits")

    def row(self):
        return [*self.x_d, *self.x_l, *self.direction, float(self.n), float(self.bits),
                self.throughput, self.recip, self.bsdf]


def to_samples(records: np.ndarray):
    n, bits, copy = decode_code(records["code"])
    dirs = oct_decode(records["dir"])
    return [SubPathSample(tuple(map(float, r["x_d"])), tuple(map(float, r["x_l"])),
                          tuple(map(float, dirs[i])), int(n[i]), int(bits[i]),
                          float(r["throughput"]), float(r["recip"]), float(r["bsdf"]), bool(copy[i]))
            for i, r in enumerate(records)]


class RecordBuffer:
    """Append-only buffer; each worker owns one, merged at the iteration barrier."""

    def __init__(self):
        self._chunks = []
        self._lock = threading.Lock()
        self._count = 0

    def extend_rows(self, rows):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, REC_WIDTH)
        if len(rows) == 0:
            return
        packed = pack_rows(rows)
        with self._lock:
            self._chunks.append(packed)
            self._count += len(packed)

    def __len__(self):
        return self._count

    def array(self) -> np.ndarray:
        with self._lock:
            if not self._chunks:
                return np.zeros(0, dtype=RECORD_DTYPE)
            return np.concatenate(self._chunks)

    @staticmethod
    def merge(buffers) -> np.ndarray:
        parts = [b.array() for b in buffers]
        parts = [p for p in parts if len(p)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=RECORD_DTYPE)


def record(buffer: RecordBuffer, sample: SubPathSample):
    """Append one sample; it becomes visible to queries after the next rebuild."""
    buffer.extend_rows([sample.row()])
