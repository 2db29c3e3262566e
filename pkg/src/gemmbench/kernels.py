"""In-process GEMM kernels under test and the registry the sweep enumerates.

Kernels in the bit-identical tier (naive, ikj, tiled, parallel) add the k
terms of every output element in increasing k order, one fp32 multiply and
one fp32 add per step, so they reproduce ``serial_gemm_ref`` exactly. The
simd kernel splits each dot product across lane accumulators and is only
bounded by the reassociation error envelope.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from gemmbench import _loops
from gemmbench.errors import GemmBenchError
from gemmbench.matrix import Matrix, check_product_shapes

KERNEL_IDS = ("naive", "ikj", "tiled", "simd", "parallel")
BIT_IDENTICAL = {"naive": True, "ikj": True, "tiled": True, "simd": False, "parallel": True}
DEFAULT_TILE = 64
MIN_TILE = 8
SUPPORTED_LANES = (16, 8, 1)


def available_parallelism() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@lru_cache(maxsize=None)
def detect_lane_width() -> int:
    """Widest fp32 vector width on the host: 16 (AVX-512), 8 (AVX2) or 1."""
    override = os.environ.get("GEMMBENCH_SIMD_LANES")
    if override:
        lanes = int(override)
        if lanes not in SUPPORTED_LANES:
            raise GemmBenchError(f"GEMMBENCH_SIMD_LANES must be one of {SUPPORTED_LANES}")
        return lanes
    try:
        from llvmlite import binding

        features = binding.get_host_cpu_features()
    except Exception:  # feature probing is best effort
        return 1
    if features.get("avx512f"):
        return 16
    if features.get("avx2"):
        return 8
    return 1


def _out(a: Matrix, b: Matrix) -> np.ndarray:
    return np.zeros((a.rows, b.cols), dtype=np.float32)


def gemm_naive(a: Matrix, b: Matrix) -> Matrix:
    check_product_shapes(a, b)
    c = _out(a, b)
    _loops.naive_ijk(a.data, b.data, c)
    return Matrix(c)


def gemm_ikj(a: Matrix, b: Matrix) -> Matrix:
    check_product_shapes(a, b)
    c = _out(a, b)
    _loops.ikj_rows(a.data, b.data, c, 0, a.rows)
    return Matrix(c)


def gemm_tiled(a: Matrix, b: Matrix, tile: int = DEFAULT_TILE) -> Matrix:
    """Blocked ii/kk/jj loops; ``tile`` is clamped to the largest dimension."""
    check_product_shapes(a, b)
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    tile = min(tile, max(a.rows, a.cols, b.cols))
    c = _out(a, b)
    _loops.tiled(a.data, b.data, c, tile)
    return Matrix(c)


def gemm_simd(a: Matrix, b: Matrix, lanes: Optional[int] = None) -> Matrix:
    """Lane-split dot products; ``lanes=1`` selects the scalar fallback."""
    check_product_shapes(a, b)
    if lanes is None:
        lanes = detect_lane_width()
    if lanes < 1:
        raise ValueError(f"lanes must be >= 1, got {lanes}")
    c = _out(a, b)
    _loops.lane_split(a.data, b.data, c, lanes)
    return Matrix(c)


def row_partition(rows: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) row blocks, one per worker; extra workers get empty blocks."""
    base, extra = divmod(rows, workers)
    blocks, start = [], 0
    for w in range(workers):
        stop = start + base + (1 if w < extra else 0)
        blocks.append((start, stop))
        start = stop
    return blocks


def gemm_parallel(a: Matrix, b: Matrix, workers: Optional[int] = None) -> Matrix:
    check_product_shapes(a, b)
    if workers is None:
        workers = available_parallelism()
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    c = _out(a, b)
    blocks = [blk for blk in row_partition(a.rows, workers) if blk[0] < blk[1]]
    if len(blocks) == 1:
        _loops.ikj_rows(a.data, b.data, c, 0, a.rows)
        return Matrix(c)

    errors: list[BaseException] = []

    def work(r0: int, r1: int) -> None:
        try:
            _loops.ikj_rows(a.data, b.data, c, r0, r1)
        except BaseException as exc:  # re-raised on the calling thread
            errors.append(exc)

    threads = [threading.Thread(target=work, args=blk, daemon=True) for blk in blocks]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return Matrix(c)


@dataclass(frozen=True)
class KernelSpec:
    """One multiplication implementation plus its tunables.

    ``fn`` overrides dispatch by id; it exists so tests can register
    counting or failing kernels without touching the real ones.
    """

    id: str
    tile: Optional[int] = None
    workers: Optional[int] = None
    lanes: Optional[int] = None
    bit_identical_tier: bool = True
    fn: Optional[Callable[[Matrix, Matrix], Matrix]] = field(default=None, compare=False, repr=False)

    def run(self, a: Matrix, b: Matrix) -> Matrix:
        if self.fn is not None:
            return self.fn(a, b)
        if self.id == "naive":
            return gemm_naive(a, b)
        if self.id == "ikj":
            return gemm_ikj(a, b)
        if self.id == "tiled":
            return gemm_tiled(a, b, self.tile or DEFAULT_TILE)
        if self.id == "simd":
            return gemm_simd(a, b, self.lanes)
        if self.id == "parallel":
            return gemm_parallel(a, b, self.workers)
        raise GemmBenchError(f"kernel {self.id!r} has no implementation")

    def effective_tile(self, n: int) -> Optional[int]:
        return None if self.tile is None else max(1, min(self.tile, n))

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "tile": self.tile,
            "workers": self.workers,
            "lanes": self.lanes,
            "bit_identical_tier": self.bit_identical_tier,
        }


def kernel_registry(tile: int = DEFAULT_TILE, workers: Optional[int] = None,
                    lanes: Optional[int] = None) -> list[KernelSpec]:
    if tile < MIN_TILE:
        raise ValueError(f"registry tile must be >= {MIN_TILE}, got {tile}")
    workers = workers or available_parallelism()
    lanes = lanes or detect_lane_width()
    return [
        KernelSpec("naive"),
        KernelSpec("ikj"),
        KernelSpec("tiled", tile=tile),
        KernelSpec("simd", lanes=lanes, bit_identical_tier=False),
        KernelSpec("parallel", workers=workers),
    ]


def warm_up_jit() -> None:
    """Compile every loop nest once so first timed calls don't pay for codegen."""
    tiny = Matrix(np.ones((2, 2), dtype=np.float32))
    for spec in kernel_registry():
        spec.run(tiny, tiny)
