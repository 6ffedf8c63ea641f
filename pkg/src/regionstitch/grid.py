"""Dense 2-D float32 kernels with a pinned, portable numeric contract.

Everything downstream (denoisers, scheduler, studies) runs on these
primitives. Two properties are deliberately stronger than what numpy
gives by default:

* ``matmul`` accumulates products over the inner dimension in ascending
  index order (k = 0, 1, ..., K-1), never reassociating, so results are
  bit-identical to a naive triple loop and stable across platforms.
* Random sampling uses a counter-based SplitMix64 stream plus Box-Muller,
  both fully specified here, so a 64-bit seed pins the exact sample
  sequence.

Row reductions (softmax sums, layer-norm moments) use numpy's built-in
reductions, which are deterministic for a given numpy build.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid2D",
    "SeededRng",
    "matmul",
    "softmax_rows",
    "layer_norm_rows",
    "topk_indices",
    "gaussian",
    "gather_rows",
    "scatter_rows",
    "write_sgrd",
    "read_sgrd",
]

SGRD_MAGIC = b"SGRD"


@dataclass(frozen=True)
class Grid2D:
    """Immutable rows x cols float32 matrix, row-major, all values finite."""

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"Grid2D needs rows >= 1 and cols >= 1, got {self.rows}x{self.cols}")
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != (self.rows, self.cols):
            raise ValueError(f"Grid2D data shape {arr.shape} does not match {self.rows}x{self.cols}")
        if not np.isfinite(arr).all():
            raise ValueError("Grid2D rejects non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Grid2D":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"Grid2D expects a 2-D array, got ndim={arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


# SplitMix64 constants (Steele, Lea & Flood 2014). The stream is counter
# based: output i mixes seed + (i+1) * GOLDEN_GAMMA, so any subsequence
# can be produced without stepping through its predecessors.
_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(seed: np.uint64, start: int, count: int) -> np.ndarray:
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = seed + idx * _GOLDEN_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX_1
    z = (z ^ (z >> np.uint64(27))) * _MIX_2
    return z ^ (z >> np.uint64(31))


@dataclass
class SeededRng:
    """Deterministic sample source: SplitMix64 bit stream, advanced explicitly.

    The same seed yields the same uint64 sequence on every platform; the
    cursor records how many stream outputs have been consumed. One owner
    per instance.
    """

    seed: int
    cursor: int = field(default=0)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def raw_u64(self, count: int) -> np.ndarray:
        out = _splitmix64(np.uint64(self.seed), self.cursor, count)
        self.cursor += count
        return out

    def uniform_open01(self, count: int) -> np.ndarray:
        """Uniforms in (0, 1]: top 53 bits of each output, plus one ulp."""
        bits = self.raw_u64(count) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * 2.0**-53


def gaussian(rng: SeededRng, rows: int, cols: int) -> Grid2D:
    """Standard normal grid via Box-Muller on the SplitMix64 stream.

    Consumes exactly 2 * ceil(rows*cols/2) stream outputs: pairs (u1, u2)
    map to r*cos(theta), r*sin(theta) with r = sqrt(-2 ln u1) and
    theta = 2 pi u2; samples are laid out row-major.
    """
    n = rows * cols
    pairs = (n + 1) // 2
    u1 = rng.uniform_open01(pairs)
    u2 = rng.uniform_open01(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    samples = np.empty(2 * pairs, dtype=np.float64)
    samples[0::2] = r * np.cos(theta)
    samples[1::2] = r * np.sin(theta)
    return Grid2D(rows, cols, samples[:n].astype(np.float32).reshape(rows, cols))


def _matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float32 product with ascending-k accumulation (no reassociation)."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for kk in range(k):
        out += a[:, kk, None] * b[None, kk, :]
    return out


def matmul(a: Grid2D, b: Grid2D) -> Grid2D:
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    return Grid2D(a.rows, b.cols, _matmul_f32(a.data, b.data))


def _softmax_rows_f32(a: np.ndarray, scale: float) -> np.ndarray:
    scaled = a * np.float32(scale)
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Grid2D, scale: float = 1.0) -> Grid2D:
    """Row-wise softmax of ``a * scale`` with max-subtraction for stability."""
    return Grid2D(a.rows, a.cols, _softmax_rows_f32(a.data, scale))


def _layer_norm_rows_f32(a: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = a.mean(axis=1, keepdims=True, dtype=np.float32)
    centered = a - mean
    var = np.mean(centered * centered, axis=1, keepdims=True, dtype=np.float32)
    return centered / np.sqrt(var + np.float32(eps))


def layer_norm_rows(a: Grid2D, eps: float = 1e-5) -> Grid2D:
    """Per-row normalization to zero mean / unit variance (no affine params)."""
    return Grid2D(a.rows, a.cols, _layer_norm_rows_f32(a.data, eps))


def topk_indices(values, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the lower index.

    Result is sorted ascending by index so downstream masks are canonical.
    """
    v = np.asarray(values)
    if v.ndim != 1:
        raise ValueError(f"topk_indices expects a vector, got ndim={v.ndim}")
    if not 0 <= k <= v.shape[0]:
        raise ValueError(f"k={k} out of range for {v.shape[0]} values")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-v, kind="stable")[:k]
    return np.sort(order).astype(np.int64)


def gather_rows(a: Grid2D, indices) -> Grid2D:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("gather_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= a.rows:
        raise ValueError(f"gather index out of range for {a.rows} rows")
    return Grid2D(idx.size, a.cols, a.data[idx])


def scatter_rows(dest: Grid2D, indices, rows: Grid2D) -> Grid2D:
    """Copy of ``dest`` with ``rows`` written at the given row indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size != rows.rows:
        raise ValueError(f"scatter got {rows.rows} rows for {idx.size} indices")
    if dest.cols != rows.cols:
        raise ValueError(f"scatter column mismatch: {dest.cols} vs {rows.cols}")
    if idx.size and (idx.min() < 0 or idx.max() >= dest.rows):
        raise ValueError(f"scatter index out of range for {dest.rows} rows")
    out = dest.data.copy()
    out[idx] = rows.data
    return Grid2D(dest.rows, dest.cols, out)


def write_sgrd(grid: Grid2D, path) -> None:
    """Write the SGRD dump: magic 'SGRD', u32le rows, u32le cols, f32le row-major."""
    with open(path, "wb") as fh:
        fh.write(SGRD_MAGIC)
        fh.write(struct.pack("<II", grid.rows, grid.cols))
        fh.write(grid.data.astype("<f4").tobytes(order="C"))


def read_sgrd(path) -> Grid2D:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SGRD_MAGIC:
            raise ValueError(f"not an SGRD file: bad magic {magic!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        payload = fh.read(4 * rows * cols)
        if len(payload) != 4 * rows * cols:
            raise ValueError(f"SGRD payload truncated: expected {rows}x{cols} floats")
        data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return Grid2D(rows, cols, data.astype(np.float32))
