"""Word-level popcount and the XOR/popcount row-product kernel.

Everything in this package ultimately reduces to one primitive: given two packed
bit-row matrices A (M x W words) and B (N x W words), produce the M x N matrix of
``sum_w popcount(A[m,w] XOR B[n,w])``. A JIT-compiled loop (single-instruction
popcount) provides the fast path; a vectorized numpy path is kept as a portable
fallback and as a cross-check. Both are exact integer kernels and must agree
bit-for-bit.

Set ``BITUNET_NO_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

WORD_BITS = 64
BLOCK_BITS = 128
WORDS_PER_BLOCK = BLOCK_BITS // WORD_BITS

# --------------------------------------------------------------------------- #
# per-word popcount
# --------------------------------------------------------------------------- #

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


def popcount_words_swar(words: np.ndarray) -> np.ndarray:
    """Portable bit-twiddling popcount of a uint64 array, as int64 counts."""
    x = np.asarray(words, dtype=np.uint64).copy()
    x -= (x >> _S1) & _M1
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return ((x * _H01) >> _S56).astype(np.int64)


def popcount_words_hw(words: np.ndarray) -> np.ndarray:
    """Hardware popcount of a uint64 array (numpy >= 2), as int64 counts."""
    return np.bitwise_count(np.asarray(words, dtype=np.uint64)).astype(np.int64)


if hasattr(np, "bitwise_count"):
    popcount_words = popcount_words_hw
else:  # pragma: no cover - numpy < 2 fallback
    popcount_words = popcount_words_swar


# --------------------------------------------------------------------------- #
# XOR/popcount row products
# --------------------------------------------------------------------------- #

_NUMBA_DISABLED = os.environ.get("BITUNET_NO_NUMBA", "") not in ("", "0")
_xor_popcount_jit = None

if not _NUMBA_DISABLED:
    try:
        from llvmlite import ir
        from numba import njit, types, uint64
        from numba.extending import intrinsic

        @intrinsic
        def _popcnt64(typingctx, src):
            sig = types.uint64(types.uint64)

            def codegen(context, builder, signature, args):
                (x,) = args
                fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
                return builder.call(fn, [x])

            return sig, codegen

        @njit(cache=True, nogil=True)
        def _xor_popcount_jit_impl(a, b, out):  # pragma: no cover - jitted
            m_rows, n_words = a.shape
            n_rows = b.shape[0]
            for m in range(m_rows):
                for n in range(n_rows):
                    acc = uint64(0)
                    for w in range(n_words):
                        acc += _popcnt64(a[m, w] ^ b[n, w])
                    out[m, n] = np.int32(acc)

        _xor_popcount_jit = _xor_popcount_jit_impl
    except ImportError:  # pragma: no cover - numba unavailable
        _xor_popcount_jit = None


def _xor_popcount_numpy(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    """Tiled broadcast fallback; tile size bounds the (tile, N, W) temporary."""
    m_rows = a.shape[0]
    n_rows, n_words = b.shape
    tile = max(1, (1 << 22) // max(1, n_rows * n_words))
    for lo in range(0, m_rows, tile):
        hi = min(lo + tile, m_rows)
        x = a[lo:hi, None, :] ^ b[None, :, :]
        out[lo:hi] = popcount_words(x).sum(axis=2, dtype=np.int64).astype(np.int32)


def using_jit() -> bool:
    """True when the JIT fast path is active."""
    return _xor_popcount_jit is not None


def xor_popcount_rows(a: np.ndarray, b: np.ndarray, threads: int = 1) -> np.ndarray:
    """out[m, n] = sum over words of popcount(a[m] XOR b[n]).

    ``a``: (M, W) uint64, ``b``: (N, W) uint64 with identical W. Returns an
    (M, N) int32 matrix. ``threads`` > 1 partitions rows of ``a`` across a
    thread pool; results are bit-identical for any thread count.
    """
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"row matrices must share word width, got {a.shape} vs {b.shape}"
        )
    m_rows = a.shape[0]
    out = np.empty((m_rows, b.shape[0]), dtype=np.int32)
    if m_rows == 0 or b.shape[0] == 0:
        return out

    kernel = _xor_popcount_jit if _xor_popcount_jit is not None else _xor_popcount_numpy

    if threads <= 1 or m_rows < 2 * threads:
        kernel(a, b, out)
        return out

    bounds = np.linspace(0, m_rows, threads + 1, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(kernel, a[lo:hi], b, out[lo:hi])
            for lo, hi in zip(bounds[:-1], bounds[1:])
            if hi > lo
        ]
        for f in futures:
            f.result()
    return out
