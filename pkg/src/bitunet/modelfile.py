"""Binary serialization: MBUN compiled-model files and RTEN raw tensors.

Both formats are little-endian throughout and fully self-contained; a written
model re-reads to a CompiledModel whose forward pass is bit-identical to the
in-memory original.

MBUN layout::

    "MBUN"  u32 version=1
    config: u32 height, width, in_channels, out_channels, stem_channels
            u32 encoder[4], tconv[4], decoder[4]
            u16 precision (12-bit ConfigId, top 4 bits zero)
            u8 pad_convention (0 = out-of-bounds reads -1, 1 = zero-padding)
            u8 sign_zero (1 = sign(0) is +1; always 1)
            u8 stem2_float, u8 reserved=0
    u32 layer_count, then per layer in execution order:
            u16 name_len, name bytes
            u8 kind (0 float-conv, 1 binary-conv, 2 masked-conv,
                     3 binary-tconv, 4 masked-tconv, 5 maxpool, 6 concat)
            u32 kernel_h, kernel_w, stride, padding, c_in, c_out (zero for
                maxpool/concat)
            payload:
              float-conv: u8 flags (1 bias, 2 batchnorm, 4 sign-activation),
                          f64 weights[c_out*kh*kw*c_in], f64 bias[c_out]?,
                          f64 gamma/beta/mean/var[c_out] + f64 eps?
              bit convs:  u64 n_bits, words[ceil(n_bits/64)] (pos plane;
                          masked kinds append the neg plane), then c_out
                          threshold records (i32 T, u8 code)
              concat:     u16 source_len, source name bytes

RTEN layout::

    "RTEN" u32 version=1, u8 dtype (0 f32, 1 f64, 2 i32, 3 bit-packed),
    u8 rank, u16 reserved=0, u64 extents[rank], payload (row-major values;
    bit-packed tensors store (n, h, w, c) extents and the per-pixel words of
    a single-segment BitTensor).

Parse failures raise FormatError carrying the byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .bitcore import BitPlane, BitTensor, MaskedWeightPlanes
from .errors import EngineError, FormatError
from .graph import CompiledLayer, CompiledModel, PrecisionMap, UNetConfig
from .layers import ConvSpec, FusedThreshold

__all__ = [
    "KIND_CODES",
    "write_model",
    "read_model",
    "write_tensor",
    "read_tensor",
]

_MODEL_MAGIC = b"MBUN"
_TENSOR_MAGIC = b"RTEN"
_VERSION = 1

KIND_CODES = {
    "float-conv": 0,
    "binary-conv": 1,
    "masked-conv": 2,
    "binary-tconv": 3,
    "masked-tconv": 4,
    "maxpool": 5,
    "concat": 6,
}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

_FLAG_BIAS = 1
_FLAG_BN = 2
_FLAG_SIGN = 4

_THRESH_DTYPE = np.dtype([("t", "<i4"), ("code", "u1")])
_TENSOR_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}


class _Reader:
    """Cursor over a byte buffer; every read checks bounds and reports offsets."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.off = 0
        self.what = what

    def fail(self, message) -> FormatError:
        return FormatError(f"{self.what}: {message}", where=f"byte {self.off}")

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.data):
            raise self.fail(f"truncated: wanted {count} bytes, {len(self.data) - self.off} left")
        out = self.data[self.off : self.off + count]
        self.off += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        raw = self.take(dtype.itemsize * count)
        return np.frombuffer(raw, dtype=dtype).copy()

    def name(self) -> str:
        (length,) = self.unpack("H")
        return self.take(length).decode("utf-8")


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _plane_bytes(plane: BitPlane) -> bytes:
    return struct.pack("<Q", plane.n_bits) + plane.words.astype("<u8").tobytes()


def _threshold_bytes(t: FusedThreshold) -> bytes:
    rec = np.empty(t.n_channels, dtype=_THRESH_DTYPE)
    rec["t"] = t.thresholds
    rec["code"] = t.codes
    return rec.tobytes()


def write_model(model: CompiledModel, path) -> None:
    cfg = model.config
    out = bytearray()
    out += _MODEL_MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack(
        "<5I", cfg.height, cfg.width, cfg.in_channels, cfg.out_channels, cfg.stem_channels
    )
    out += struct.pack("<4I", *cfg.encoder_channels)
    out += struct.pack("<4I", *cfg.tconv_channels)
    out += struct.pack("<4I", *cfg.decoder_channels)
    out += struct.pack(
        "<H4B",
        cfg.precision.config_id(),
        1 if cfg.pad_mode == "zero" else 0,
        1,  # sign(0) = +1
        1 if cfg.stem2_float else 0,
        0,
    )
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        out += _pack_name(layer.name)
        out += struct.pack("<B", KIND_CODES[layer.kind])
        s = layer.spec
        if s is None:
            out += struct.pack("<6I", 0, 0, 0, 0, 0, 0)
        else:
            out += struct.pack(
                "<6I", s.kernel_h, s.kernel_w, s.stride, s.padding, s.c_in, s.c_out
            )
        if layer.kind == "float-conv":
            flags = (
                (_FLAG_BIAS if layer.bias is not None else 0)
                | (_FLAG_BN if layer.bn is not None else 0)
                | (_FLAG_SIGN if layer.apply_sign else 0)
            )
            out += struct.pack("<B", flags)
            out += np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
            if layer.bias is not None:
                out += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
            if layer.bn is not None:
                gamma, beta, mean, var, eps = layer.bn
                for arr in (gamma, beta, mean, var):
                    out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
                out += struct.pack("<d", eps)
        elif layer.kind in ("binary-conv", "binary-tconv"):
            out += _plane_bytes(layer.weights)
            out += _threshold_bytes(layer.threshold)
        elif layer.kind in ("masked-conv", "masked-tconv"):
            out += _plane_bytes(layer.weights.pos)
            out += _plane_bytes(layer.weights.neg)
            out += _threshold_bytes(layer.threshold)
        elif layer.kind == "concat":
            out += _pack_name(layer.concat_with)
    Path(path).write_bytes(bytes(out))


def _read_plane(r: _Reader) -> BitPlane:
    (n_bits,) = r.unpack("Q")
    words = r.array(np.dtype("<u8"), -(-n_bits // 64))
    return BitPlane(int(n_bits), words.astype(np.uint64))


def read_model(path) -> CompiledModel:
    r = _Reader(Path(path).read_bytes(), f"model file {path}")
    if r.take(4) != _MODEL_MAGIC:
        r.off = 0
        raise r.fail("bad magic (expected MBUN)")
    (version,) = r.unpack("I")
    if version != _VERSION:
        raise r.fail(f"unsupported version {version}")
    height, width, in_c, out_c, stem_c = r.unpack("5I")
    encoder = r.unpack("4I")
    tconv = r.unpack("4I")
    decoder = r.unpack("4I")
    precision_id, pad_flag, sign_flag, stem2_float, _ = r.unpack("H4B")
    if precision_id >= 4096:
        raise r.fail(f"precision id {precision_id} has nonzero top bits")
    if pad_flag > 1 or sign_flag != 1:
        raise r.fail(f"unknown convention flags pad={pad_flag} sign={sign_flag}")
    pad_mode = "zero" if pad_flag else "neg_one"
    try:
        config = UNetConfig(
            in_channels=in_c,
            height=height,
            width=width,
            stem_channels=stem_c,
            encoder_channels=encoder,
            tconv_channels=tconv,
            decoder_channels=decoder,
            out_channels=out_c,
            precision=PrecisionMap.from_config_id(precision_id),
            stem2_float=bool(stem2_float),
            pad_mode=pad_mode,
        )
    except EngineError as exc:
        raise r.fail(f"bad config block: {exc}") from exc
    (layer_count,) = r.unpack("I")
    layers = []
    for _ in range(layer_count):
        name = r.name()
        (kind_code,) = r.unpack("B")
        if kind_code not in _KIND_NAMES:
            raise r.fail(f"unknown layer kind code {kind_code}")
        kind = _KIND_NAMES[kind_code]
        kh, kw, stride, padding, c_in, c_out = r.unpack("6I")
        try:
            if kind in ("maxpool", "concat"):
                spec = None
            else:
                spec = ConvSpec(
                    kh, kw, stride, padding, c_in, c_out,
                    pad_mode=pad_mode if kind in ("binary-conv", "masked-conv") else "neg_one",
                )
            if kind == "float-conv":
                (flags,) = r.unpack("B")
                count = c_out * kh * kw * c_in
                weights = r.array(np.dtype("<f8"), count).reshape(c_out, kh, kw, c_in)
                bias = r.array(np.dtype("<f8"), c_out) if flags & _FLAG_BIAS else None
                bn = None
                if flags & _FLAG_BN:
                    parts = [r.array(np.dtype("<f8"), c_out) for _ in range(4)]
                    (eps,) = r.unpack("d")
                    bn = (*parts, eps)
                layers.append(
                    CompiledLayer(
                        name, kind, spec, weights=weights, bias=bias, bn=bn,
                        apply_sign=bool(flags & _FLAG_SIGN),
                    )
                )
            elif kind in ("binary-conv", "binary-tconv"):
                plane = _read_plane(r)
                thresh = r.array(_THRESH_DTYPE, c_out)
                layers.append(
                    CompiledLayer(
                        name, kind, spec, weights=plane,
                        threshold=FusedThreshold(thresh["t"], thresh["code"]),
                    )
                )
            elif kind in ("masked-conv", "masked-tconv"):
                pos = _read_plane(r)
                neg = _read_plane(r)
                thresh = r.array(_THRESH_DTYPE, c_out)
                layers.append(
                    CompiledLayer(
                        name, kind, spec, weights=MaskedWeightPlanes(pos, neg),
                        threshold=FusedThreshold(thresh["t"], thresh["code"]),
                    )
                )
            elif kind == "maxpool":
                layers.append(CompiledLayer(name, kind))
            else:  # concat
                layers.append(CompiledLayer(name, kind, concat_with=r.name()))
        except FormatError:
            raise
        except EngineError as exc:
            raise r.fail(f"layer {name!r} is inconsistent: {exc}") from exc
    if r.off != len(r.data):
        raise r.fail(f"{len(r.data) - r.off} trailing bytes")
    return CompiledModel(config, tuple(layers))


# --------------------------------------------------------------------------- #
# raw tensors
# --------------------------------------------------------------------------- #


def write_tensor(path, value) -> None:
    """Serialize an ndarray (f32/f64/i32) or a single-segment BitTensor."""
    out = bytearray()
    out += _TENSOR_MAGIC
    out += struct.pack("<I", _VERSION)
    if isinstance(value, BitTensor):
        if len(value.segments) > 1:
            raise FormatError("only single-segment bit tensors are serializable")
        out += struct.pack("<BBH", 3, 4, 0)
        out += struct.pack("<4Q", value.n, value.h, value.w, value.c)
        out += value.words.astype("<u8").tobytes()
    else:
        arr = np.asarray(value)
        codes = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int32): 2}
        if arr.dtype not in codes:
            raise FormatError(f"unsupported tensor dtype {arr.dtype}")
        out += struct.pack("<BBH", codes[arr.dtype], arr.ndim, 0)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(out))


def read_tensor(path):
    """Read an RTEN file: returns an ndarray, or a BitTensor for dtype 3."""
    r = _Reader(Path(path).read_bytes(), f"tensor file {path}")
    if r.take(4) != _TENSOR_MAGIC:
        r.off = 0
        raise r.fail("bad magic (expected RTEN)")
    (version,) = r.unpack("I")
    if version != _VERSION:
        raise r.fail(f"unsupported version {version}")
    dtype_code, rank, _ = r.unpack("BBH")
    extents = r.unpack(f"{rank}Q")
    if dtype_code == 3:
        if rank != 4:
            raise r.fail(f"bit-packed tensors are rank 4, got {rank}")
        n, h, w, c = (int(e) for e in extents)
        wpp = -(-c // 128) * 2
        words = r.array(np.dtype("<u8"), n * h * w * wpp).reshape(n, h, w, wpp)
        try:
            tensor = BitTensor(n, h, w, c, words.astype(np.uint64))
            tensor.check_pad_lanes()
        except EngineError as exc:
            raise r.fail(str(exc)) from exc
        if r.off != len(r.data):
            raise r.fail(f"{len(r.data) - r.off} trailing bytes")
        return tensor
    if dtype_code not in _TENSOR_DTYPES:
        raise r.fail(f"unknown dtype code {dtype_code}")
    dtype = _TENSOR_DTYPES[dtype_code]
    count = 1
    for e in extents:
        count *= int(e)
    arr = r.array(dtype, count).reshape([int(e) for e in extents])
    if r.off != len(r.data):
        raise r.fail(f"{len(r.data) - r.off} trailing bytes")
    return arr.astype(dtype.newbyteorder("="))
