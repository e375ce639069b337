"""Layer lowering: conv/tconv/pool/concat/threshold on packed bit tensors.

Bit-path convolutions run as im2row + XOR/popcount GEMM. Out-of-bounds pixels
gather zero words, i.e. every pad lane reads as -1 (`pad_mode="neg_one"`, the
default). Masked convs may request `pad_mode="zero"` instead: the engine then
adds an exact per-pixel correction equal to the signed weight sum over the
out-of-bounds kernel positions (flipping a pad activation from -1 to 0 adds
+sum(w) for that position). Pure-binary convs cannot express a 0 activation,
so they reject `pad_mode="zero"`.

Integer accumulator tensors are plain (n, h, w, c) int32 arrays throughout.
Weight planes are flat bit-planes in out-channel-major order: for each output
channel, kernel positions in (dy, dx) row-major order, each position spanning
one pixel's worth of channel lanes (so weight lanes mirror the input tensor's
segment layout, including alignment gaps after concatenation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitcore import (
    BitPlane,
    BitTensor,
    ChannelSegment,
    MaskedWeightPlanes,
    PackedBitMatrix,
    _pack_bit_rows,
    _unpack_bit_rows,
    bit_gemm,
    pack_bits_tensor,
)
from .errors import (
    LayoutError,
    ShapeError,
    UnsupportedConfigError,
    ValueAlphabetError,
)
from .kernels import WORD_BITS, popcount_words

__all__ = [
    "ConvSpec",
    "FusedThreshold",
    "DIR_GE",
    "DIR_LE",
    "CONST_NEG",
    "CONST_POS",
    "segment_lanes",
    "segment_lane_table",
    "pack_conv_weights",
    "unpack_conv_weights",
    "lower_conv_to_gemm",
    "conv_forward",
    "transposed_conv_forward",
    "maxpool2",
    "concat_channels",
    "fuse_bn_sign",
    "apply_threshold",
    "float_conv",
    "float_bn_sign",
]

# threshold comparison codes (also the serialized on-disk values)
DIR_GE = 0  # bit = acc >= T
DIR_LE = 1  # bit = acc <= T
CONST_NEG = 2  # bit = 0 regardless of acc (degenerate batchnorm)
CONST_POS = 3  # bit = 1 regardless of acc

_INT32_MIN = -(2**31)
_INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution. ``pad_mode`` only affects bit-path convs."""

    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    c_in: int
    c_out: int
    pad_mode: str = "neg_one"

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ShapeError(f"kernel/stride must be >= 1: {self}")
        if self.padding < 0 or min(self.c_in, self.c_out) < 1:
            raise ShapeError(f"padding/channels out of range: {self}")
        if self.pad_mode not in ("neg_one", "zero"):
            raise UnsupportedConfigError(f"unknown pad_mode {self.pad_mode!r}")

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        h_out = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        w_out = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h_out <= 0 or w_out <= 0:
            raise ShapeError(f"kernel larger than padded input: {self} on {h}x{w}")
        return h_out, w_out


@dataclass(frozen=True, eq=False)
class FusedThreshold:
    """Per-channel integer replacement for batchnorm + bias + sign.

    ``codes[j]`` selects the comparison (DIR_GE / DIR_LE) or a constant output
    (CONST_NEG / CONST_POS); ``thresholds[j]`` is the int32 comparison bound.
    """

    thresholds: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.thresholds, dtype=np.int32)
        c = np.ascontiguousarray(self.codes, dtype=np.uint8)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "codes", c)
        if t.ndim != 1 or t.shape != c.shape:
            raise ShapeError(f"thresholds/codes must be matching vectors, got {t.shape} vs {c.shape}")
        if c.size and c.max() > CONST_POS:
            raise ValueAlphabetError(f"unknown threshold code {int(c.max())}")

    @property
    def n_channels(self) -> int:
        return self.thresholds.shape[0]


# --------------------------------------------------------------------------- #
# weight packing
# --------------------------------------------------------------------------- #


def segment_lanes(segments: tuple[ChannelSegment, ...]) -> int:
    """Per-pixel lane span (block-rounded) of a segment layout."""
    end = max((s.lane_offset + s.count for s in segments), default=0)
    return -(-end // 128) * 128


def segment_lane_table(segments: tuple[ChannelSegment, ...]) -> np.ndarray:
    """Lane index of each logical channel under a segment layout."""
    runs = [s.lane_offset + np.arange(s.count, dtype=np.int64) for s in segments]
    return np.concatenate(runs) if runs else np.zeros(0, dtype=np.int64)


def pack_conv_weights(w: np.ndarray, segments: tuple[ChannelSegment, ...], masked: bool):
    """Pack dense weights (c_out, k_h, k_w, c_in) into flat planes.

    The lane layout follows the input tensor's per-pixel channel ``segments``
    (pass ``x.segments``) so packed weights line up with gathered activation
    words. Returns :class:`MaskedWeightPlanes` (masked) or :class:`BitPlane`
    (binary).
    """
    w = np.asarray(w)
    if w.ndim != 4:
        raise ShapeError(f"expected (c_out, k_h, k_w, c_in) weights, got {w.shape}")
    co, kh, kw, ci = w.shape
    if ci != sum(s.count for s in segments):
        raise ShapeError(
            f"weight c_in {ci} != {sum(s.count for s in segments)} segment channels"
        )
    alphabet = (-1, 0, 1) if masked else (-1, 1)
    if w.size and not np.isin(w, alphabet).all():
        raise ValueAlphabetError(f"weights outside {alphabet}")

    lpp = segment_lanes(segments)
    k_lanes = kh * kw * lpp
    lane_idx = (
        np.arange(kh * kw, dtype=np.int64)[:, None] * lpp + segment_lane_table(segments)[None, :]
    ).reshape(-1)
    wflat = w.reshape(co, kh * kw * ci)

    def plane_for(value) -> BitPlane:
        bits = np.zeros((co, k_lanes), dtype=np.uint8)
        bits[:, lane_idx] = wflat == value
        return BitPlane(co * k_lanes, _pack_bit_rows(bits).reshape(-1))

    pos = plane_for(1)
    if masked:
        return MaskedWeightPlanes(pos, plane_for(-1))
    return pos


def unpack_conv_weights(weights, spec: ConvSpec, segments: tuple[ChannelSegment, ...]) -> np.ndarray:
    """Inverse of :func:`pack_conv_weights`: planes back to dense int8 weights.

    ``segments`` must be the input lane layout the weights were packed
    against. Returns (c_out, k_h, k_w, c_in) values in {-1,0,+1} (masked)
    or {-1,+1} (binary).
    """
    co, kh, kw = spec.c_out, spec.kernel_h, spec.kernel_w
    lpp = segment_lanes(segments)
    k_lanes = kh * kw * lpp
    masked = isinstance(weights, MaskedWeightPlanes)
    plane = weights.pos if masked else weights
    if plane.n_bits != co * k_lanes:
        raise LayoutError(
            f"weight plane has {plane.n_bits} lanes, expected {co}*{k_lanes}"
        )
    lane_idx = (
        np.arange(kh * kw, dtype=np.int64)[:, None] * lpp + segment_lane_table(segments)[None, :]
    ).reshape(-1)

    def bits_of(p: BitPlane) -> np.ndarray:
        return _unpack_bit_rows(p.words.reshape(co, k_lanes // WORD_BITS))

    ci = sum(s.count for s in segments)
    if masked:
        vals = bits_of(plane).astype(np.int8) - bits_of(weights.neg).astype(np.int8)
        return vals[:, lane_idx].reshape(co, kh, kw, ci)
    vals = bits_of(plane).astype(np.int8) * 2 - 1
    return vals[:, lane_idx].reshape(co, kh, kw, ci)


def _weight_matrices(weights, c_out: int, k_lanes: int):
    """Slice flat weight planes into (pos, neg|None) K-lane row matrices."""
    masked = isinstance(weights, MaskedWeightPlanes)
    plane = weights.pos if masked else weights
    if not isinstance(plane, BitPlane):
        raise LayoutError(f"expected BitPlane or MaskedWeightPlanes, got {type(weights).__name__}")
    if plane.n_bits != c_out * k_lanes:
        raise LayoutError(
            f"weight plane has {plane.n_bits} lanes, expected {c_out}*{k_lanes}"
        )
    words_per_row = k_lanes // WORD_BITS
    b_pos = PackedBitMatrix(k_lanes, plane.words.reshape(c_out, words_per_row))
    b_neg = (
        PackedBitMatrix(k_lanes, weights.neg.words.reshape(c_out, words_per_row))
        if masked
        else None
    )
    return b_pos, b_neg


def weight_position_sums(weights, c_out: int, kh: int, kw: int, lanes_per_pixel: int) -> np.ndarray:
    """Signed per-(out-channel, kernel-position) weight sums from the planes.

    sum_c w[o, dy, dx, c] = popc(pos slice) - popc(neg slice); used by the
    zero-padding correction and available to profilers.
    """
    masked = isinstance(weights, MaskedWeightPlanes)
    plane = weights.pos if masked else weights
    wpp = lanes_per_pixel // WORD_BITS
    shape = (c_out, kh * kw, wpp)
    pos = popcount_words(plane.words.reshape(shape)).sum(axis=2)
    if masked:
        neg = popcount_words(weights.neg.words.reshape(shape)).sum(axis=2)
        pos = pos - neg
    return pos.reshape(c_out, kh, kw).astype(np.int32)


# --------------------------------------------------------------------------- #
# convolution
# --------------------------------------------------------------------------- #


def lower_conv_to_gemm(x: BitTensor, spec: ConvSpec) -> tuple[PackedBitMatrix, tuple[int, int, int]]:
    """im2row gather: one packed K-lane row per output pixel.

    K = k_h * k_w * lanes_per_pixel; out-of-bounds positions contribute zero
    words (all lanes -1). Returns the row matrix and (n, h_out, w_out).
    """
    if spec.c_in != x.c:
        raise ShapeError(f"spec c_in {spec.c_in} != input channels {x.c}")
    h_out, w_out = spec.out_extent(x.h, x.w)
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    wpp = x.words_per_pixel
    padded = x.words if p == 0 else np.pad(x.words, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((x.n, h_out, w_out, kh, kw, wpp), dtype=np.uint64)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, dy, dx, :] = padded[
                :, dy : dy + s * h_out : s, dx : dx + s * w_out : s, :
            ]
    rows = cols.reshape(x.n * h_out * w_out, kh * kw * wpp)
    return PackedBitMatrix(kh * kw * wpp * WORD_BITS, rows), (x.n, h_out, w_out)


def _oob_position_map(h: int, w: int, spec: ConvSpec, h_out: int, w_out: int) -> np.ndarray:
    """Boolean (h_out, w_out, k_h, k_w): True where the tap is out of bounds."""
    ry = np.arange(h_out)[:, None] * spec.stride - spec.padding + np.arange(spec.kernel_h)[None, :]
    rx = np.arange(w_out)[:, None] * spec.stride - spec.padding + np.arange(spec.kernel_w)[None, :]
    row_oob = (ry < 0) | (ry >= h)
    col_oob = (rx < 0) | (rx >= w)
    return row_oob[:, None, :, None] | col_oob[None, :, None, :]


def conv_forward(x: BitTensor, weights, spec: ConvSpec, threads: int = 1) -> np.ndarray:
    """Exact integer convolution of a packed tensor; returns int32 accumulators.

    ``weights`` is a flat :class:`MaskedWeightPlanes` (ternary) or
    :class:`BitPlane` (binary) in the documented lane order.
    """
    masked = isinstance(weights, MaskedWeightPlanes)
    if spec.pad_mode == "zero" and not masked:
        raise UnsupportedConfigError(
            "binary convs cannot zero-pad: {-1,+1} activations have no 0 state"
        )
    k_lanes = spec.kernel_h * spec.kernel_w * x.lanes_per_pixel
    b_pos, b_neg = _weight_matrices(weights, spec.c_out, k_lanes)
    a, (n, h_out, w_out) = lower_conv_to_gemm(x, spec)
    k_true = spec.kernel_h * spec.kernel_w * x.c
    acc = bit_gemm(a, b_pos, b_neg, k_true, threads=threads)
    acc = acc.reshape(n, h_out, w_out, spec.c_out)
    if spec.pad_mode == "zero" and spec.padding > 0:
        wsum = weight_position_sums(
            weights, spec.c_out, spec.kernel_h, spec.kernel_w, x.lanes_per_pixel
        )
        oob = _oob_position_map(x.h, x.w, spec, h_out, w_out)
        corr = np.tensordot(oob.astype(np.int32), wsum, axes=([2, 3], [1, 2]))
        acc = acc + corr[None, :, :, :].astype(np.int32)
    return acc


def transposed_conv_forward(x: BitTensor, weights, spec: ConvSpec, threads: int = 1) -> np.ndarray:
    """Transposed conv with kernel = stride: s^2 parity-split GEMMs.

    Each output pixel receives exactly one kernel tap, so the op is s^2
    independent 1x1-style products scattered by output-position parity.
    """
    if spec.kernel_h != spec.stride or spec.kernel_w != spec.stride:
        raise UnsupportedConfigError(
            f"transposed conv requires kernel = stride, got {spec.kernel_h}x{spec.kernel_w} stride {spec.stride}"
        )
    if spec.padding:
        raise UnsupportedConfigError("transposed conv does not support padding")
    if spec.c_in != x.c:
        raise ShapeError(f"spec c_in {spec.c_in} != input channels {x.c}")
    s = spec.stride
    lpp = x.lanes_per_pixel
    wpp = x.words_per_pixel
    masked = isinstance(weights, MaskedWeightPlanes)
    plane = weights.pos if masked else weights
    if not isinstance(plane, BitPlane):
        raise LayoutError(f"expected BitPlane or MaskedWeightPlanes, got {type(weights).__name__}")
    if plane.n_bits != spec.c_out * s * s * lpp:
        raise LayoutError(
            f"weight plane has {plane.n_bits} lanes, expected {spec.c_out}*{s * s * lpp}"
        )
    a = PackedBitMatrix(lpp, x.words.reshape(x.n * x.h * x.w, wpp))
    pos_words = plane.words.reshape(spec.c_out, s * s, wpp)
    neg_words = weights.neg.words.reshape(spec.c_out, s * s, wpp) if masked else None
    out = np.empty((x.n, x.h * s, x.w * s, spec.c_out), dtype=np.int32)
    for dy in range(s):
        for dx in range(s):
            tap = dy * s + dx
            b_pos = PackedBitMatrix(lpp, pos_words[:, tap, :])
            b_neg = PackedBitMatrix(lpp, neg_words[:, tap, :]) if masked else None
            acc = bit_gemm(a, b_pos, b_neg, x.c, threads=threads)
            out[:, dy::s, dx::s, :] = acc.reshape(x.n, x.h, x.w, spec.c_out)
    return out


# --------------------------------------------------------------------------- #
# pool / concat
# --------------------------------------------------------------------------- #


def maxpool2(x: BitTensor) -> BitTensor:
    """2x2 max-pool: wordwise OR (max over {-1,+1} is OR on the bit encoding)."""
    if x.h % 2 or x.w % 2:
        raise ShapeError(f"extents must be even, got {x.h}x{x.w}")
    v = x.words.reshape(x.n, x.h // 2, 2, x.w // 2, 2, x.words_per_pixel)
    pooled = v[:, :, 0, :, 0] | v[:, :, 0, :, 1] | v[:, :, 1, :, 0] | v[:, :, 1, :, 1]
    return BitTensor(x.n, x.h // 2, x.w // 2, x.c, pooled, x.segments)


def concat_channels(a: BitTensor, b: BitTensor) -> BitTensor:
    """Channel concatenation; operand b starts at a fresh 128-bit block."""
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise ShapeError(
            f"spatial extents differ: {(a.n, a.h, a.w)} vs {(b.n, b.h, b.w)}"
        )
    if b.c == 0:
        return a
    if a.c == 0:
        return b
    shift = a.lanes_per_pixel
    segments = a.segments + tuple(
        ChannelSegment(s.lane_offset + shift, s.count) for s in b.segments
    )
    words = np.concatenate([a.words, b.words], axis=-1)
    return BitTensor(a.n, a.h, a.w, a.c + b.c, words, segments)


# --------------------------------------------------------------------------- #
# fused threshold activation
# --------------------------------------------------------------------------- #


def _bn_predicate(acc, gamma, beta, mean, sigma, bias):
    """The exact float64 sign predicate the fused threshold must reproduce."""
    pre = acc + bias
    return gamma * (pre - mean) / sigma + beta >= 0.0


def _snap(t_star: float, up: bool) -> int:
    """Round the estimated decision point to an int32-clipped integer."""
    if math.isfinite(t_star):
        v = math.ceil(t_star) if up else math.floor(t_star)
    else:
        v = _INT32_MAX if t_star > 0 else _INT32_MIN
    return int(min(max(v, _INT32_MIN), _INT32_MAX))


def _smallest_true(pred, guess: int) -> int:
    """Smallest int32 T with pred(T) true; pred monotone, pred(INT32_MAX) true."""
    t = guess
    for _ in range(4):
        if t > _INT32_MIN and pred(t - 1):
            t -= 1
        elif t < _INT32_MAX and not pred(t):
            t += 1
        else:
            break
    if pred(t) and (t == _INT32_MIN or not pred(t - 1)):
        return t
    lo, hi = _INT32_MIN, _INT32_MAX  # guess was far off: bisect the bracket
    if pred(lo):
        return lo
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _largest_true(pred, guess: int) -> int:
    """Largest int32 T with pred(T) true; pred monotone, pred(INT32_MIN) true."""
    t = guess
    for _ in range(4):
        if t < _INT32_MAX and pred(t + 1):
            t += 1
        elif t > _INT32_MIN and not pred(t):
            t -= 1
        else:
            break
    if pred(t) and (t == _INT32_MAX or not pred(t + 1)):
        return t
    lo, hi = _INT32_MIN, _INT32_MAX
    if pred(hi):
        return hi
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def fuse_bn_sign(gamma, beta, mean, var, eps, bias=None) -> FusedThreshold:
    """Fold batchnorm + bias + sign into per-channel integer thresholds.

    With sigma = sqrt(var + eps) and y = gamma*((acc + bias) - mean)/sigma +
    beta, the output bit is 1 iff y >= 0 (sign(0) = +1). gamma > 0 gives an
    ascending predicate (bit = acc >= T), gamma < 0 a descending one
    (bit = acc <= T), gamma = 0 a constant. Thresholds are snapped with
    ceil/floor and refined against the float predicate (bisecting when the
    snap lands far off); channels whose decision point falls outside int32
    degrade to constant codes. The fused form is therefore exact for every
    representable int32 accumulator.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    c = gamma.shape[0]
    if not (beta.shape == mean.shape == var.shape == (c,)):
        raise ShapeError("batchnorm parameter vectors must share one channel axis")
    bias = np.zeros(c) if bias is None else np.asarray(bias, dtype=np.float64)
    if bias.shape != (c,):
        raise ShapeError(f"bias shape {bias.shape} != ({c},)")
    if np.any(var < 0):
        raise ValueAlphabetError("variance must be nonnegative")
    params = np.stack([gamma, beta, mean, var, bias])
    if not np.isfinite(params).all() or not (eps > 0 and math.isfinite(eps)):
        raise ValueAlphabetError("batchnorm parameters must be finite with eps > 0")

    sigma = np.sqrt(var + eps)
    thresholds = np.zeros(c, dtype=np.int32)
    codes = np.empty(c, dtype=np.uint8)
    for j in range(c):
        g, b8, m, s, b0 = gamma[j], beta[j], mean[j], sigma[j], bias[j]
        if g == 0.0:
            codes[j] = CONST_POS if b8 >= 0.0 else CONST_NEG
            continue
        pred = lambda a: bool(_bn_predicate(np.float64(a), g, b8, m, s, b0))
        t_star = m - b0 - b8 * s / g
        if g > 0.0:
            if not pred(_INT32_MAX):  # decision point above int32: never fires
                codes[j] = CONST_NEG
                continue
            codes[j] = DIR_GE
            thresholds[j] = _smallest_true(pred, _snap(t_star, up=True))
        else:
            if not pred(_INT32_MIN):  # decision point below int32: never fires
                codes[j] = CONST_NEG
                continue
            codes[j] = DIR_LE
            thresholds[j] = _largest_true(pred, _snap(t_star, up=False))
    return FusedThreshold(thresholds, codes)


def apply_threshold(acc: np.ndarray, t: FusedThreshold) -> BitTensor:
    """Compare int32 accumulators against fused thresholds and pack the bits."""
    acc = np.asarray(acc)
    if acc.ndim != 4:
        raise ShapeError(f"expected (n, h, w, c) accumulators, got {acc.shape}")
    if acc.shape[-1] != t.n_channels:
        raise ShapeError(f"{acc.shape[-1]} channels vs {t.n_channels} threshold entries")
    bits = np.empty(acc.shape, dtype=bool)
    ge = t.codes == DIR_GE
    le = t.codes == DIR_LE
    bits[..., ge] = acc[..., ge] >= t.thresholds[ge]
    bits[..., le] = acc[..., le] <= t.thresholds[le]
    bits[..., t.codes == CONST_NEG] = False
    bits[..., t.codes == CONST_POS] = True
    return pack_bits_tensor(bits)


# --------------------------------------------------------------------------- #
# full-precision endpoints
# --------------------------------------------------------------------------- #


def float_conv(x: np.ndarray, w: np.ndarray, bias, spec: ConvSpec) -> np.ndarray:
    """Double-precision convolution for the stem/head (zero spatial padding)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-d activations/weights, got {x.shape} / {w.shape}")
    n, h, ww, ci = x.shape
    if w.shape != (spec.c_out, spec.kernel_h, spec.kernel_w, spec.c_in) or ci != spec.c_in:
        raise ShapeError(f"weight shape {w.shape} inconsistent with {spec}")
    h_out, w_out = spec.out_extent(h, ww)
    s, p = spec.stride, spec.padding
    padded = np.zeros((n, h + 2 * p, ww + 2 * p, ci), dtype=np.float64)
    padded[:, p : p + h, p : p + ww, :] = x
    out = np.zeros((n, h_out, w_out, spec.c_out), dtype=np.float64)
    for dy in range(spec.kernel_h):
        for dx in range(spec.kernel_w):
            patch = padded[:, dy : dy + s * h_out : s, dx : dx + s * w_out : s, :]
            out += patch @ w[:, dy, dx, :].T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out


def float_bn_sign(acc: np.ndarray, gamma, beta, mean, var, eps, bias=None) -> BitTensor:
    """Batchnorm + sign on float accumulators (the full-precision stem path)."""
    acc = np.asarray(acc, dtype=np.float64)
    sigma = np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    b = 0.0 if bias is None else np.asarray(bias, dtype=np.float64)
    bits = _bn_predicate(acc, np.asarray(gamma, np.float64), np.asarray(beta, np.float64),
                         np.asarray(mean, np.float64), sigma, b)
    return pack_bits_tensor(bits)
