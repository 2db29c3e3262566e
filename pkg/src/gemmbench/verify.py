"""Tier-A bit-identity and Tier-B error-bound checks shared by ``gemmbench verify`` and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from gemmbench.kernels import gemm_ikj, gemm_naive, gemm_parallel, gemm_simd, gemm_tiled
from gemmbench.matrix import Matrix, mse, random_matrix, serial_gemm_ref, serial_gemm_ref64

UNIT_ROUNDOFF = 2.0 ** -24
BOUND_FACTOR = 4
TIER_A_EXTRA_SIZES = (65, 100, 128, 257)
TILES = (8, 16, 64)
WORKERS = (1, 2, 3, 7)


@dataclass
class Violation:
    check: str
    kernel: str
    n: int
    seed: int
    detail: str

    def __str__(self) -> str:
        return f"[{self.check}] {self.kernel} n={self.n} seed={self.seed}: {self.detail}"


def tier_a_variants():
    yield "naive", gemm_naive
    yield "ikj", gemm_ikj
    for tile in TILES:
        yield f"tiled(tile={tile})", lambda a, b, t=tile: gemm_tiled(a, b, t)
    for workers in WORKERS:
        yield f"parallel(workers={workers})", lambda a, b, w=workers: gemm_parallel(a, b, w)


def tier_a_sizes(max_n: int) -> list[int]:
    return list(range(1, min(max_n, 64) + 1)) + [n for n in TIER_A_EXTRA_SIZES if n <= max_n]


def check_tier_a(sizes: Iterable[int], seeds: Sequence[int]) -> list[Violation]:
    found = []
    for n in sizes:
        for seed in seeds:
            a = random_matrix(n, n, seed)
            b = random_matrix(n, n, seed + 1000)
            ref = serial_gemm_ref(a, b)
            for name, fn in tier_a_variants():
                out = fn(a, b)
                if not out.bit_equal(ref):
                    diff = int(np.count_nonzero(out.data.view(np.uint32) != ref.data.view(np.uint32)))
                    found.append(Violation("tier-a", name, n, seed, f"{diff} elements differ from oracle"))
                elif mse(out, ref) != 0.0:
                    found.append(Violation("tier-a", name, n, seed, "bit-equal output with nonzero MSE"))
    return found


def reassociation_bound(a: Matrix, b: Matrix, factor: float = BOUND_FACTOR) -> np.ndarray:
    """Per-element bound factor * N * u * sum_k |a_ik * b_kj|, in float64."""
    abs_prod = serial_gemm_ref64(Matrix(np.abs(a.data)), Matrix(np.abs(b.data))).data
    return factor * a.cols * UNIT_ROUNDOFF * abs_prod


def bound_excess(c: Matrix, a: Matrix, b: Matrix, ref64: Matrix = None) -> float:
    """Largest |c - ref64| minus its bound; <= 0 means every element is inside."""
    if ref64 is None:
        ref64 = serial_gemm_ref64(a, b)
    err = np.abs(c.data.astype(np.float64) - ref64.data)
    return float(np.max(err - reassociation_bound(a, b)))


def check_tier_b(sizes: Iterable[int], seeds: Sequence[int], lanes=None) -> list[Violation]:
    found = []
    for n in sizes:
        for seed in seeds:
            a = random_matrix(n, n, seed)
            b = random_matrix(n, n, seed + 1000)
            excess = bound_excess(gemm_simd(a, b, lanes), a, b)
            if excess > 0:
                found.append(Violation("tier-b", f"simd(lanes={lanes or 'auto'})", n, seed,
                                       f"error exceeds bound by {excess:.3e}"))
    return found
