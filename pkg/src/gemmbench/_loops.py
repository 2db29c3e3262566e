"""Compiled loop nests behind the reference oracles and the in-process kernels.

Every float32 loop here relies on LLVM's default of not contracting a
multiply followed by an add into an FMA; numba only enables contraction
under ``fastmath``, which is never used in this module.
"""

import numpy as np
from numba import njit

_JIT = dict(nogil=True, cache=True, boundscheck=False)


@njit(**_JIT)
def ref_ikj_f32(a, b, c):
    # c must be zeroed; per-element k order is increasing
    n, kdim = a.shape
    p = b.shape[1]
    for i in range(n):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(p):
                c[i, j] = c[i, j] + aik * b[k, j]


@njit(**_JIT)
def ref_ikj_f64(a, b, c):
    n, kdim = a.shape
    p = b.shape[1]
    for i in range(n):
        for k in range(kdim):
            aik = np.float64(a[i, k])
            for j in range(p):
                c[i, j] = c[i, j] + aik * np.float64(b[k, j])


@njit(**_JIT)
def naive_ijk(a, b, c):
    n, kdim = a.shape
    p = b.shape[1]
    for i in range(n):
        for j in range(p):
            s = np.float32(0.0)
            for k in range(kdim):
                s = s + a[i, k] * b[k, j]
            c[i, j] = s


@njit(**_JIT)
def ikj_rows(a, b, c, r0, r1):
    kdim = a.shape[1]
    p = b.shape[1]
    for i in range(r0, r1):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(p):
                c[i, j] = c[i, j] + aik * b[k, j]


@njit(**_JIT)
def tiled(a, b, c, tile):
    n, kdim = a.shape
    p = b.shape[1]
    for ii in range(0, n, tile):
        i_end = min(ii + tile, n)
        for kk in range(0, kdim, tile):
            k_end = min(kk + tile, kdim)
            for jj in range(0, p, tile):
                j_end = min(jj + tile, p)
                width = j_end - jj
                for i in range(ii, i_end):
                    crow = c[i, jj:j_end]
                    for k in range(kk, k_end):
                        aik = a[i, k]
                        brow = b[k, jj:j_end]
                        for j in range(width):
                            crow[j] = crow[j] + aik * brow[j]


@njit(**_JIT)
def lane_split(a, b, c, lanes):
    """Products with ``lanes`` independent partial sums per output element.

    Lane ``l`` accumulates the terms with k = l, l + lanes, ... in increasing
    order. The lane partials are then summed left to right and the ragged k
    tail (kdim % lanes terms) is added in scalar order. Partials for a whole
    output row are kept side by side so the j loop streams contiguously.
    """
    n, kdim = a.shape
    p = b.shape[1]
    body = kdim - kdim % lanes
    part = np.empty((lanes, p), dtype=np.float32)
    for i in range(n):
        part[:, :] = np.float32(0.0)
        for k in range(body):
            acc = part[k % lanes]
            aik = a[i, k]
            brow = b[k]
            for j in range(p):
                acc[j] = acc[j] + aik * brow[j]
        crow = c[i]
        for j in range(p):
            crow[j] = part[0, j]
        for l in range(1, lanes):
            acc = part[l]
            for j in range(p):
                crow[j] = crow[j] + acc[j]
        for k in range(body, kdim):
            aik = a[i, k]
            brow = b[k]
            for j in range(p):
                crow[j] = crow[j] + aik * brow[j]
