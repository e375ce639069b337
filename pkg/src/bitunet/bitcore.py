"""Bit-packed containers and exact XOR/popcount dot products.

Encoding
--------
A bipolar value a in {-1,+1} is stored as the bit a' = (a+1)/2, so bit 1 means
+1 and bit 0 means -1. Lane i lives at bit (i mod 64) of word (i // 64):
LSB-first within a 64-bit word, words in ascending lane order, two words per
128-bit channel block. A ternary weight b in {-1,0,+1} is stored subtractively
as two planes with b = pos - neg and pos AND neg = 0 everywhere.

Dot products reduce to popcounts of XORed words::

    binary:  sum a_i*b_i = n - 2*popc(a' ^ b')
    masked:  sum a_i*b_i = popc(a' ^ neg) - popc(a' ^ pos)

Pad lanes (a' = 0, pos = neg = 0) contribute nothing to either form, so every
container may be padded to word/block boundaries freely and results never need
a pad correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError, PlaneOverlapError, ShapeError, ValueAlphabetError
from .kernels import BLOCK_BITS, WORD_BITS, WORDS_PER_BLOCK, popcount_words, xor_popcount_rows

__all__ = [
    "BitPlane",
    "MaskedWeightPlanes",
    "AccumulatorTile",
    "PackedBitMatrix",
    "ChannelSegment",
    "BitTensor",
    "pack_bipolar",
    "unpack_bipolar",
    "pack_tensor",
    "unpack_tensor",
    "dot_binary",
    "dot_masked",
    "bit_tile_mma",
    "bit_gemm",
    "TILE_M",
    "TILE_N",
    "TILE_K",
]

TILE_M = 8
TILE_N = 8
TILE_K = BLOCK_BITS


def _words_for(n_bits: int) -> int:
    return -(-n_bits // WORD_BITS)


def _pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., L) 0/1 array into (..., L/64) uint64 words, LSB-first.

    L must be a multiple of 64.
    """
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    if bits.shape[-1] % WORD_BITS:
        raise LayoutError(f"lane count {bits.shape[-1]} not a multiple of {WORD_BITS}")
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(np.dtype("<u8")).astype(np.uint64)


def _unpack_bit_rows(words: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_pack_bit_rows`: (..., W) uint64 -> (..., W*64) bits."""
    words = np.ascontiguousarray(words, dtype=np.dtype("<u8"))
    return np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")


def _tail_mask(n_bits: int) -> int:
    """Mask of valid bits in the final word of an n_bits-lane plane."""
    rem = n_bits % WORD_BITS
    return (1 << rem) - 1 if rem else (1 << WORD_BITS) - 1


@dataclass(frozen=True, eq=False)
class BitPlane:
    """A packed vector of ``n_bits`` bipolar lanes (see module docstring)."""

    n_bits: int
    words: np.ndarray

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        object.__setattr__(self, "words", words)
        if self.n_bits < 0:
            raise LayoutError(f"negative lane count {self.n_bits}")
        if words.ndim != 1 or words.shape[0] != _words_for(self.n_bits):
            raise LayoutError(
                f"expected {_words_for(self.n_bits)} words for {self.n_bits} lanes, "
                f"got shape {words.shape}"
            )
        if self.n_bits % WORD_BITS and words.size:
            if int(words[-1]) & ~_tail_mask(self.n_bits):
                raise LayoutError("pad lanes beyond n_bits must be zero")


@dataclass(frozen=True, eq=False)
class MaskedWeightPlanes:
    """Subtractive encoding of a ternary vector: value = pos - neg per lane."""

    pos: BitPlane
    neg: BitPlane

    def __post_init__(self):
        if self.pos.n_bits != self.neg.n_bits:
            raise LayoutError(
                f"pos/neg lane counts differ: {self.pos.n_bits} vs {self.neg.n_bits}"
            )
        if np.any(self.pos.words & self.neg.words):
            raise PlaneOverlapError("a lane is set in both pos and neg planes")

    @property
    def n_bits(self) -> int:
        return self.pos.n_bits


def pack_bipolar(values) -> BitPlane:
    """Pack a sequence of {-1,+1} values into a BitPlane."""
    v = np.asarray(values)
    if v.size == 0:
        return BitPlane(0, np.zeros(0, dtype=np.uint64))
    v = v.reshape(-1)
    if not np.isin(v, (-1, 1)).all():
        raise ValueAlphabetError("pack_bipolar expects values in {-1,+1}")
    n = v.shape[0]
    bits = np.zeros(_words_for(n) * WORD_BITS, dtype=np.uint8)
    bits[:n] = v == 1
    return BitPlane(n, _pack_bit_rows(bits))


def unpack_bipolar(plane: BitPlane) -> np.ndarray:
    """Unpack a BitPlane back to an int8 array of {-1,+1} values."""
    if plane.n_bits == 0:
        return np.zeros(0, dtype=np.int8)
    bits = _unpack_bit_rows(plane.words)[: plane.n_bits]
    return (bits.astype(np.int8) * 2) - 1


def dot_binary(a: BitPlane, b: BitPlane, n: int | None = None) -> int:
    """Exact bipolar dot product sum(a_i * b_i) via n - 2*popc(a' ^ b')."""
    if a.n_bits != b.n_bits:
        raise LayoutError(f"lane counts differ: {a.n_bits} vs {b.n_bits}")
    if n is not None and n != a.n_bits:
        raise LayoutError(f"explicit lane count {n} != plane lane count {a.n_bits}")
    return int(a.n_bits - 2 * popcount_words(a.words ^ b.words).sum())


def dot_masked(a: BitPlane, w: MaskedWeightPlanes, n: int | None = None) -> int:
    """Exact bipolar x ternary dot product via popc(a'^neg) - popc(a'^pos).

    No additive constant is needed: each true lane contributes exactly
    a_i*b_i and pad lanes contribute zero (certified exhaustively in the
    acceptance suite).
    """
    if a.n_bits != w.n_bits:
        raise LayoutError(f"lane counts differ: {a.n_bits} vs {w.n_bits}")
    if n is not None and n != a.n_bits:
        raise LayoutError(f"explicit lane count {n} != plane lane count {a.n_bits}")
    d_neg = popcount_words(a.words ^ w.neg.words).sum()
    d_pos = popcount_words(a.words ^ w.pos.words).sum()
    return int(d_neg - d_pos)


# --------------------------------------------------------------------------- #
# tile kernel and GEMM
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class AccumulatorTile:
    """8x8 int32 accumulator tile; one cell per (row, col) output pair."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.int32)
        if v.shape != (TILE_M, TILE_N):
            raise ShapeError(f"accumulator tile must be {TILE_M}x{TILE_N}, got {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls) -> "AccumulatorTile":
        return cls(np.zeros((TILE_M, TILE_N), dtype=np.int32))


def bit_tile_mma(acc: AccumulatorTile, a_frag: np.ndarray, b_frag: np.ndarray) -> AccumulatorTile:
    """acc[m][n] += popc(A_row_m XOR B_col_n) over one 8x8x128 tile.

    ``a_frag`` holds 8 rows of 128 bits (row-major, shape (8, 2) uint64);
    ``b_frag`` holds 8 columns of 128 bits (column-major, one column per
    word-pair row, same shape). Pure: returns a new tile.
    """
    a = np.ascontiguousarray(a_frag, dtype=np.uint64)
    b = np.ascontiguousarray(b_frag, dtype=np.uint64)
    if a.shape != (TILE_M, WORDS_PER_BLOCK) or b.shape != (TILE_N, WORDS_PER_BLOCK):
        raise ShapeError(
            f"tile fragments must be ({TILE_M},{WORDS_PER_BLOCK}) words, "
            f"got {a.shape} and {b.shape}"
        )
    return AccumulatorTile(acc.values + xor_popcount_rows(a, b))


@dataclass(frozen=True, eq=False)
class PackedBitMatrix:
    """R packed bit-rows of ``n_lanes`` lanes each (words shape (R, n_lanes/64))."""

    n_lanes: int
    words: np.ndarray

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        object.__setattr__(self, "words", words)
        if words.ndim != 2 or words.shape[1] != _words_for(self.n_lanes):
            raise LayoutError(
                f"expected row width {_words_for(self.n_lanes)} words for "
                f"{self.n_lanes} lanes, got shape {words.shape}"
            )
        if self.n_lanes % WORD_BITS and words.size:
            if np.any(words[:, -1] & np.uint64(~_tail_mask(self.n_lanes) & (2**64 - 1))):
                raise LayoutError("pad lanes beyond n_lanes must be zero")

    @property
    def n_rows(self) -> int:
        return self.words.shape[0]

    @classmethod
    def pack_rows(cls, values: np.ndarray) -> "PackedBitMatrix":
        """Pack an (R, L) array of {-1,+1} rows."""
        v = np.asarray(values)
        if v.ndim != 2:
            raise ShapeError(f"expected a 2-d row array, got shape {v.shape}")
        if v.size and not np.isin(v, (-1, 1)).all():
            raise ValueAlphabetError("pack_rows expects values in {-1,+1}")
        r, n = v.shape
        lanes = _words_for(n) * WORD_BITS
        bits = np.zeros((r, lanes), dtype=np.uint8)
        bits[:, :n] = v == 1
        return cls(n, _pack_bit_rows(bits))

    @classmethod
    def pack_ternary_rows(cls, values: np.ndarray) -> tuple["PackedBitMatrix", "PackedBitMatrix"]:
        """Pack an (R, L) array of {-1,0,+1} rows into (pos, neg) matrices."""
        v = np.asarray(values)
        if v.ndim != 2:
            raise ShapeError(f"expected a 2-d row array, got shape {v.shape}")
        if v.size and not np.isin(v, (-1, 0, 1)).all():
            raise ValueAlphabetError("pack_ternary_rows expects values in {-1,0,+1}")
        r, n = v.shape
        lanes = _words_for(n) * WORD_BITS
        bits_pos = np.zeros((r, lanes), dtype=np.uint8)
        bits_neg = np.zeros((r, lanes), dtype=np.uint8)
        bits_pos[:, :n] = v == 1
        bits_neg[:, :n] = v == -1
        return cls(n, _pack_bit_rows(bits_pos)), cls(n, _pack_bit_rows(bits_neg))


def bit_gemm(
    a: PackedBitMatrix,
    b_pos: PackedBitMatrix,
    b_neg: PackedBitMatrix | None,
    k_true: int,
    threads: int = 1,
) -> np.ndarray:
    """Exact M x N integer product of packed bit-rows.

    Masked mode (``b_neg`` given): out = popc(A^neg) - popc(A^pos), the
    subtractive ternary product. Binary mode (``b_neg`` None): out =
    k_true - 2*popc(A^B) where ``k_true`` is the number of true (non-pad)
    lanes. K must be 128-block aligned; pad lanes must be zero on both sides.
    """
    if a.n_lanes != b_pos.n_lanes:
        raise LayoutError(f"K mismatch: A has {a.n_lanes} lanes, B has {b_pos.n_lanes}")
    if a.n_lanes % BLOCK_BITS:
        raise LayoutError(f"K = {a.n_lanes} lanes is not {BLOCK_BITS}-block aligned")
    if not 0 <= k_true <= a.n_lanes:
        raise LayoutError(f"k_true = {k_true} outside [0, {a.n_lanes}]")
    if b_neg is not None:
        if b_neg.n_lanes != b_pos.n_lanes or b_neg.n_rows != b_pos.n_rows:
            raise LayoutError("pos/neg weight matrices must share shape")
        if np.any(b_pos.words & b_neg.words):
            raise PlaneOverlapError("a weight lane is set in both pos and neg planes")
        d_neg = xor_popcount_rows(a.words, b_neg.words, threads=threads)
        d_pos = xor_popcount_rows(a.words, b_pos.words, threads=threads)
        return d_neg - d_pos
    d = xor_popcount_rows(a.words, b_pos.words, threads=threads)
    return (np.int32(k_true) - 2 * d).astype(np.int32)


# --------------------------------------------------------------------------- #
# packed activation tensors
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ChannelSegment:
    """A run of ``count`` logical channels starting at pixel lane ``lane_offset``.

    Concatenation block-aligns each operand, so a tensor's channels may occupy
    several disjoint lane runs; lanes between runs are pad lanes pinned to 0.
    """

    lane_offset: int
    count: int


@dataclass(frozen=True, eq=False)
class BitTensor:
    """An (n, h, w, c) bipolar tensor, channels packed into per-pixel lanes.

    ``words`` has shape (n, h, w, words_per_pixel); lane L of a pixel is bit
    (L mod 64) of word (L // 64). Logical channel j of segment s occupies lane
    ``s.lane_offset + (j - start_of_s)``. Every lane outside all segments is 0.
    """

    n: int
    h: int
    w: int
    c: int
    words: np.ndarray
    segments: tuple[ChannelSegment, ...] = field(default=())

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        object.__setattr__(self, "words", words)
        segments = tuple(self.segments) if self.segments else (
            (ChannelSegment(0, self.c),) if self.c else ()
        )
        object.__setattr__(self, "segments", segments)
        if sum(s.count for s in segments) != self.c:
            raise LayoutError(
                f"segment channel counts {[s.count for s in segments]} do not sum to c={self.c}"
            )
        end = 0
        for s in segments:
            if s.lane_offset % BLOCK_BITS or s.count <= 0:
                raise LayoutError(f"segment {s} must be block-aligned with positive count")
            if s.lane_offset < end:
                raise LayoutError(f"segment {s} overlaps the previous segment")
            end = s.lane_offset + s.count
        wpp = self.words_per_pixel
        if words.shape != (self.n, self.h, self.w, wpp):
            raise ShapeError(
                f"words shape {words.shape} != {(self.n, self.h, self.w, wpp)}"
            )

    @property
    def lanes_per_pixel(self) -> int:
        end = max((s.lane_offset + s.count for s in self.segments), default=0)
        return -(-end // BLOCK_BITS) * BLOCK_BITS

    @property
    def words_per_pixel(self) -> int:
        return self.lanes_per_pixel // WORD_BITS

    @property
    def blocks_per_pixel(self) -> int:
        return self.lanes_per_pixel // BLOCK_BITS

    def lane_table(self) -> np.ndarray:
        """Lane index of each logical channel, shape (c,)."""
        table = np.empty(self.c, dtype=np.int64)
        at = 0
        for s in self.segments:
            table[at : at + s.count] = s.lane_offset + np.arange(s.count)
            at += s.count
        return table

    def valid_lane_words(self) -> np.ndarray:
        """Per-pixel word mask with 1-bits exactly at in-segment lanes."""
        bits = np.zeros(self.lanes_per_pixel, dtype=np.uint8)
        for s in self.segments:
            bits[s.lane_offset : s.lane_offset + s.count] = 1
        return _pack_bit_rows(bits)

    def check_pad_lanes(self) -> None:
        """Raise LayoutError if any pad lane is nonzero."""
        if not self.words.size:
            return
        if np.any(self.words & ~self.valid_lane_words()):
            raise LayoutError("pad lanes must be zero in every pixel")


def pack_tensor(values: np.ndarray) -> BitTensor:
    """Pack an (n, h, w, c) array of {-1,+1} values into a BitTensor."""
    v = np.asarray(values)
    if v.ndim != 4:
        raise ShapeError(f"expected (n, h, w, c), got shape {v.shape}")
    if v.size and not np.isin(v, (-1, 1)).all():
        raise ValueAlphabetError("pack_tensor expects values in {-1,+1}")
    n, h, w, c = v.shape
    lanes = -(-c // BLOCK_BITS) * BLOCK_BITS if c else 0
    bits = np.zeros((n, h, w, lanes), dtype=np.uint8)
    bits[..., :c] = v == 1
    words = (
        _pack_bit_rows(bits)
        if lanes
        else np.zeros((n, h, w, 0), dtype=np.uint64)
    )
    return BitTensor(n, h, w, c, words, (ChannelSegment(0, c),) if c else ())


def pack_bits_tensor(bits: np.ndarray) -> BitTensor:
    """Pack an (n, h, w, c) boolean array (True = +1) without alphabet checks.

    Fast path for producers that already hold comparison results (e.g. the
    fused threshold); semantically identical to packing where(bits, 1, -1).
    """
    b = np.asarray(bits, dtype=np.uint8)
    if b.ndim != 4:
        raise ShapeError(f"expected (n, h, w, c), got shape {b.shape}")
    n, h, w, c = b.shape
    if c == 0:
        return BitTensor(n, h, w, 0, np.zeros((n, h, w, 0), dtype=np.uint64), ())
    lanes = -(-c // BLOCK_BITS) * BLOCK_BITS
    padded = np.zeros((n, h, w, lanes), dtype=np.uint8)
    padded[..., :c] = b
    return BitTensor(n, h, w, c, _pack_bit_rows(padded), (ChannelSegment(0, c),))


def unpack_tensor(t: BitTensor) -> np.ndarray:
    """Unpack a BitTensor to an (n, h, w, c) int8 array of {-1,+1} values."""
    if t.c == 0:
        return np.zeros((t.n, t.h, t.w, 0), dtype=np.int8)
    bits = _unpack_bit_rows(t.words)
    out = bits[..., t.lane_table()]
    return (out.astype(np.int8) * 2) - 1
