"""Dense fp32 matrices, deterministic fill, serial oracles, MSE and GEMMMAT1 I/O."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from gemmbench import _loops
from gemmbench.errors import FormatError, ShapeError, SizeError

PathLike = Union[str, os.PathLike]

MAGIC = b"GEMMMAT1"
HEADER = struct.Struct("<8sII")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


@dataclass(eq=False)
class Matrix:
    """Row-major matrix backed by a C-contiguous 2-D numpy array.

    ``data`` is float32 for benchmark operands and results; the float64
    variant produced by :func:`serial_gemm_ref64` is :class:`Matrix64`.
    """

    data: np.ndarray

    dtype = np.float32

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=self.dtype)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"expected a non-empty 2-D array, got shape {arr.shape}")
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def bit_equal(self, other: "Matrix") -> bool:
        """Elementwise bit equality (distinguishes -0.0 from 0.0)."""
        if self.shape != other.shape or self.data.dtype != other.data.dtype:
            return False
        itype = np.uint32 if self.data.dtype == np.float32 else np.uint64
        return bool(np.array_equal(self.data.view(itype), other.data.view(itype)))

    @classmethod
    def from_rows(cls, rows) -> "Matrix":
        return cls(np.array(rows, dtype=cls.dtype))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n, dtype=cls.dtype))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.rows}x{self.cols})"


class Matrix64(Matrix):
    dtype = np.float64


def matrix_new(rows: int, cols: int, *, index_bits: int = 64) -> Matrix:
    """Zero matrix; ``index_bits`` caps rows*cols like a fixed-width size type."""
    if rows < 1 or cols < 1:
        raise SizeError(f"dimensions must be positive, got {rows}x{cols}")
    if rows * cols > (1 << index_bits) - 1:
        raise SizeError(f"{rows}x{cols} elements overflow a {index_bits}-bit size")
    return Matrix(np.zeros((rows, cols), dtype=np.float32))


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def mix_seed(seed: int, value: int) -> int:
    """Derive a 64-bit stream seed from ``seed`` and an integer tag."""
    z = np.array([seed & _MASK64], dtype=np.uint64) ^ _mix64(np.array([value & _MASK64], dtype=np.uint64))
    return int(_mix64(z + _GOLDEN)[0])


def fill_random(m: Matrix, seed: int) -> Matrix:
    """Fill ``m`` in place with uniform values in [-1, 1) and return it.

    Element at flat index ``idx`` takes the first SplitMix64 output of the
    stream whose state is ``seed ^ mix64(idx)``; the top 24 bits become
    ``k / 2**23 - 1``, which is exact in float32.
    """
    idx = np.arange(m.rows * m.cols, dtype=np.uint64)
    state = np.uint64(seed & _MASK64) ^ _mix64(idx)
    out = _mix64(state + _GOLDEN)
    k = (out >> np.uint64(40)).astype(np.float64)
    m.flat[:] = (k / float(1 << 23) - 1.0).astype(np.float32)
    return m


def random_matrix(rows: int, cols: int, seed: int) -> Matrix:
    return fill_random(matrix_new(rows, cols), seed)


def check_product_shapes(a: Matrix, b: Matrix) -> None:
    if a.cols != b.rows:
        raise ShapeError(f"cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")


def serial_gemm_ref(a: Matrix, b: Matrix) -> Matrix:
    """Ground-truth fp32 product: each c[i][j] sums its k terms in increasing
    k order with a separate single-precision multiply and add per step."""
    check_product_shapes(a, b)
    c = np.zeros((a.rows, b.cols), dtype=np.float32)
    _loops.ref_ikj_f32(a.data, b.data, c)
    return Matrix(c)


def serial_gemm_ref64(a: Matrix, b: Matrix) -> Matrix64:
    """Same ordering as :func:`serial_gemm_ref`, widened to float64 throughout."""
    check_product_shapes(a, b)
    c = np.zeros((a.rows, b.cols), dtype=np.float64)
    _loops.ref_ikj_f64(a.data, b.data, c)
    return Matrix64(c)


def mse(x: Matrix, y: Matrix) -> float:
    if x.shape != y.shape:
        raise ShapeError(f"mse of mismatched shapes {x.shape} and {y.shape}")
    diff = x.data.astype(np.float64) - y.data.astype(np.float64)
    return float(np.mean(diff * diff))


def write_matrix_file(path: PathLike, m: Matrix) -> None:
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, m.rows, m.cols))
        fh.write(m.data.astype("<f4", copy=False).tobytes())


def read_matrix_file(path: PathLike) -> Matrix:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: invalid dimensions {rows}x{cols}")
    expected = HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(rows, cols)
    return Matrix(data.astype(np.float32))
