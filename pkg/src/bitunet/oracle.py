"""Naive dense reference implementations used as correctness anchors.

Everything here recomputes layer semantics from first principles on plain
integer arrays: per-output-pixel loops, explicit padding, no bit packing and
no code shared with the packed engine. Integer accumulators are exact; the
only floating point is the full-precision stem/head and the batchnorm-sign
reference. Deliberately unoptimized - these functions exist to be obviously
correct, not fast.

Layer channel convention matches the engine: activations (n, h, w, c),
weights (c_out, k_h, k_w, c_in).

Threshold codes (shared vocabulary with the engine's serialized form):
0 = bit set iff acc >= T, 1 = bit set iff acc <= T, 2 = constant -1,
3 = constant +1.
"""

from __future__ import annotations

import numpy as np

THRESH_GE = 0
THRESH_LE = 1
THRESH_CONST_NEG = 2
THRESH_CONST_POS = 3


def _check_alphabet(arr, allowed, what):
    if arr.size and not np.isin(arr, allowed).all():
        raise ValueError(f"{what} contains values outside {sorted(allowed)}")


def ref_conv(x, w, stride=1, padding=0, pad_value=-1, dtype=np.int64):
    """Direct sliding-window convolution on dense arrays.

    x: (n, h, w, c_in) in {-1,+1}; w: (c_out, k_h, k_w, c_in) in {-1,0,+1}.
    Out-of-bounds activations take ``pad_value`` (-1 by default, 0 for the
    zero-padded masked mode). Returns (n, h_out, w_out, c_out) accumulators.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _check_alphabet(x, (-1, 1), "activations")
    _check_alphabet(w, (-1, 0, 1), "weights")
    n, h, ww, ci = x.shape
    co, kh, kw, wci = w.shape
    if wci != ci:
        raise ValueError(f"weight c_in {wci} != input c_in {ci}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (ww + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError("kernel larger than padded input")
    padded = np.full((n, h + 2 * padding, ww + 2 * padding, ci), pad_value, dtype=dtype)
    padded[:, padding : padding + h, padding : padding + ww, :] = x
    wmat = w.reshape(co, kh * kw * ci).astype(dtype)
    acc = np.empty((n, h_out, w_out, co), dtype=dtype)
    for p in range(h_out):
        for q in range(w_out):
            patch = padded[:, p * stride : p * stride + kh, q * stride : q * stride + kw, :]
            acc[:, p, q, :] = patch.reshape(n, -1) @ wmat.T
    return acc.astype(np.int32) if dtype == np.int64 else acc


def ref_tconv(x, w, stride):
    """Transposed convolution with kernel = stride (non-overlapping taps).

    x: (n, h, w, c_in) in {-1,+1}; w: (c_out, s, s, c_in) in {-1,0,+1}.
    out[n, p*s+dy, q*s+dx, o] = sum_c x[n,p,q,c] * w[o,dy,dx,c].
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _check_alphabet(x, (-1, 1), "activations")
    _check_alphabet(w, (-1, 0, 1), "weights")
    n, h, ww, ci = x.shape
    co, kh, kw, wci = w.shape
    if kh != stride or kw != stride:
        raise ValueError(f"kernel {kh}x{kw} != stride {stride}")
    if wci != ci:
        raise ValueError(f"weight c_in {wci} != input c_in {ci}")
    out = np.empty((n, h * stride, ww * stride, co), dtype=np.int64)
    for p in range(h):
        for q in range(ww):
            vec = x[:, p, q, :].astype(np.int64)
            for dy in range(stride):
                for dx in range(stride):
                    out[:, p * stride + dy, q * stride + dx, :] = (
                        vec @ w[:, dy, dx, :].astype(np.int64).T
                    )
    return out.astype(np.int32)


def ref_pool(x):
    """2x2 max-pool on a dense {-1,+1} tensor."""
    x = np.asarray(x)
    _check_alphabet(x, (-1, 1), "activations")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"extents must be even, got {h}x{w}")
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    for p in range(h // 2):
        for q in range(w // 2):
            window = x[:, 2 * p : 2 * p + 2, 2 * q : 2 * q + 2, :]
            out[:, p, q, :] = window.max(axis=(1, 2))
    return out


def ref_threshold(acc, thresholds, codes):
    """Per-channel integer threshold comparison -> {-1,+1} tensor."""
    acc = np.asarray(acc)
    thresholds = np.asarray(thresholds)
    codes = np.asarray(codes)
    c = acc.shape[-1]
    if thresholds.shape != (c,) or codes.shape != (c,):
        raise ValueError(f"expected {c} per-channel threshold entries")
    out = np.empty(acc.shape, dtype=np.int8)
    for j in range(c):
        code = int(codes[j])
        if code == THRESH_GE:
            bit = acc[..., j] >= thresholds[j]
        elif code == THRESH_LE:
            bit = acc[..., j] <= thresholds[j]
        elif code == THRESH_CONST_NEG:
            bit = np.zeros(acc.shape[:-1], dtype=bool)
        elif code == THRESH_CONST_POS:
            bit = np.ones(acc.shape[:-1], dtype=bool)
        else:
            raise ValueError(f"unknown threshold code {code}")
        out[..., j] = np.where(bit, 1, -1)
    return out


def ref_bn_sign(acc, gamma, beta, mean, var, eps, bias=None):
    """sign(batchnorm(acc + bias)) in float64, sign(0) = +1, as {-1,+1}."""
    acc = np.asarray(acc, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    c = acc.shape[-1]
    out = np.empty(acc.shape, dtype=np.int8)
    for j in range(c):
        pre = acc[..., j] + (0.0 if bias is None else float(np.asarray(bias)[j]))
        sigma = np.sqrt(var[j] + eps)
        y = gamma[j] * (pre - mean[j]) / sigma + beta[j]
        out[..., j] = np.where(y >= 0.0, 1, -1)
    return out


def ref_float_conv(x, w, bias=None, stride=1, padding=0):
    """Double-precision direct convolution (zero spatial padding)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, h, ww, ci = x.shape
    co, kh, kw, wci = w.shape
    if wci != ci:
        raise ValueError(f"weight c_in {wci} != input c_in {ci}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (ww + 2 * padding - kw) // stride + 1
    padded = np.zeros((n, h + 2 * padding, ww + 2 * padding, ci), dtype=np.float64)
    padded[:, padding : padding + h, padding : padding + ww, :] = x
    out = np.empty((n, h_out, w_out, co), dtype=np.float64)
    for p in range(h_out):
        for q in range(w_out):
            patch = padded[:, p * stride : p * stride + kh, q * stride : q * stride + kw, :]
            out[:, p, q, :] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def ref_concat(a, b):
    """Channel concatenation of dense tensors."""
    if a.shape[:3] != b.shape[:3]:
        raise ValueError(f"spatial extents differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)


# --------------------------------------------------------------------------- #
# full network replay
# --------------------------------------------------------------------------- #


def _bitize(record, acc, binarize):
    """Binarize integer accumulators per the record's threshold or BN params."""
    if binarize == "threshold":
        t, codes = record["threshold"]
        return ref_threshold(acc, t, codes)
    if binarize == "batchnorm":
        gamma, beta, mean, var, eps = record["bn"]
        return ref_bn_sign(acc, gamma, beta, mean, var, eps, record.get("bias"))
    raise ValueError(f"unknown binarize mode {binarize!r}")


def _bit_conv(record, x, binarize, stride=1, padding=1):
    acc = ref_conv(
        x,
        record["w"],
        stride=stride,
        padding=padding,
        pad_value=record.get("pad_value", -1),
    )
    return acc, _bitize(record, acc, binarize)


def ref_forward(cfg, layers, image, binarize="threshold"):
    """Replay the full network densely; returns {name: {"acc", "out"}}.

    ``cfg`` is any object with the config fields (stem_channels,
    encoder_channels, tconv_channels, decoder_channels, out_channels,
    stem2_float); ``layers`` maps layer names to dense records:

    - float convs ("stem", "head", optionally "stem2"): w (f64), bias, bn
    - bit convs: w (int8 ternary/binary dense), threshold (T, codes), bn,
      optional pad_value
    - transposed convs ("up-CT1".."up-CT4"): same, with w (c_out, s, s, c_in)

    The topology walk here is written independently of the engine's graph
    builder, so wiring bugs on either side surface as trace mismatches.
    """
    trace = {}

    def note(name, acc, out):
        trace[name] = {"acc": acc, "out": out}
        return out

    rec = layers["stem"]
    acc = ref_float_conv(image, rec["w"], rec.get("bias"), stride=1, padding=1)
    gamma, beta, mean, var, eps = rec["bn"]
    x = note("stem", acc, ref_bn_sign(acc, gamma, beta, mean, var, eps))

    rec = layers["stem2"]
    if getattr(cfg, "stem2_float", False):
        acc = ref_float_conv(x.astype(np.float64), rec["w"], rec.get("bias"), 1, 1)
        gamma, beta, mean, var, eps = rec["bn"]
        x = note("stem2", acc, ref_bn_sign(acc, gamma, beta, mean, var, eps))
    else:
        acc, x = _bit_conv(rec, x, binarize)
        note("stem2", acc, x)

    skips = [x]
    for i in range(1, 5):
        x = note(f"pool{i}", None, ref_pool(x))
        for half in ("a", "b"):
            rec = layers[f"down-C{i}.{half}"]
            acc, x = _bit_conv(rec, x, binarize)
            note(f"down-C{i}.{half}", acc, x)
        if i < 4:
            skips.append(x)

    for i in range(1, 5):
        rec = layers[f"up-CT{i}"]
        stride = rec["w"].shape[1]
        acc = ref_tconv(x, rec["w"], stride)
        x = note(f"up-CT{i}", acc, _bitize(rec, acc, binarize))
        x = note(f"concat{i}", None, ref_concat(x, skips[4 - i]))
        for half in ("a", "b"):
            rec = layers[f"up-C{i}.{half}"]
            acc, x = _bit_conv(rec, x, binarize)
            note(f"up-C{i}.{half}", acc, x)

    rec = layers["head"]
    logits = ref_float_conv(x.astype(np.float64), rec["w"], rec.get("bias"), 1, 0)
    note("head", logits, logits)
    trace["mask"] = (logits >= 0.0).astype(np.uint8)
    return trace
