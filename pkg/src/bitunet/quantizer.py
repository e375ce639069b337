"""Quantize float weight bundles into bit-planes and fused thresholds.

Masked (ternary) quantization uses the usual magnitude rule: with
delta = t * mean(|w|) over the layer (t = 0.7 by default), weights above
+delta map to +1, below -delta to -1, and the rest to 0. Bundles that already
contain exact {-1,0,+1} (or {-1,+1}) values pass through unchanged, so
externally trained ternary/binary weights are preserved bit-for-bit. Binary
quantization is sign(w) with sign(0) = +1.

On-disk bundle format (``save_bundle``/``load_bundle``): a directory holding
a ``manifest`` text file and raw little-endian float32 blobs. Grammar, one
record per layer::

    bitunet-bundle 1
    layer <name> <conv|tconv> <c_out> <k_h> <k_w> <c_in>
    data <weight|bias|gamma|beta|mean|var> <blob-file> <byte-offset> <count>
    eps <float>
    end

``weight`` holds c_out*k_h*k_w*c_in values in (c_out, k_h, k_w, c_in)
row-major order; the per-channel fields hold c_out values each. Blank lines
and ``#`` comments are allowed. Malformed manifests raise
:class:`~bitunet.errors.BundleError` with the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitcore import BitPlane, MaskedWeightPlanes, pack_bipolar
from .errors import BundleError, ShapeError, ValueAlphabetError
from .kernels import popcount_words
from .layers import FusedThreshold, fuse_bn_sign

__all__ = [
    "DEFAULT_EPS",
    "DEFAULT_TERNARY_T",
    "BundleEntry",
    "WeightBundle",
    "PreparedLayer",
    "LayerSparsity",
    "SparsityReport",
    "is_ternary",
    "is_bipolar",
    "ternarize_values",
    "binarize_values",
    "ternary_planes",
    "ternarize",
    "binarize",
    "sparsity",
    "quantize_bundle",
    "dense_records",
    "synthesize_bundle",
    "save_bundle",
    "load_bundle",
]

DEFAULT_EPS = 1e-5
DEFAULT_TERNARY_T = 0.7

_BUNDLE_MAGIC = "bitunet-bundle"
_BUNDLE_VERSION = 1
_FIELDS = ("weight", "bias", "gamma", "beta", "mean", "var")


# --------------------------------------------------------------------------- #
# quantization rules
# --------------------------------------------------------------------------- #


def is_ternary(w) -> bool:
    """True when every value is exactly -1, 0, or +1."""
    w = np.asarray(w)
    return bool(np.isin(w, (-1, 0, 1)).all()) if w.size else True


def is_bipolar(w) -> bool:
    """True when every value is exactly -1 or +1."""
    w = np.asarray(w)
    return bool(np.isin(w, (-1, 1)).all()) if w.size else True


def ternarize_values(w, t: float = DEFAULT_TERNARY_T) -> np.ndarray:
    """Dense {-1,0,+1} int8 quantization of a float tensor.

    Already-ternary tensors pass through unchanged (no threshold applied).
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ShapeError("cannot ternarize an empty tensor")
    if t < 0:
        raise ValueAlphabetError(f"threshold factor must be >= 0, got {t}")
    if is_ternary(w):
        return w.astype(np.int8)
    delta = t * np.abs(w).mean(dtype=np.float64)
    out = np.zeros(w.shape, dtype=np.int8)
    out[w > delta] = 1
    out[w < -delta] = -1
    return out


def binarize_values(w) -> np.ndarray:
    """Dense {-1,+1} int8 quantization: sign(w) with sign(0) = +1."""
    w = np.asarray(w)
    if w.size == 0:
        raise ShapeError("cannot binarize an empty tensor")
    return np.where(w >= 0, 1, -1).astype(np.int8)


def ternary_planes(values) -> MaskedWeightPlanes:
    """Pack exact {-1,0,+1} values into flat pos/neg planes (natural order)."""
    v = np.asarray(values).reshape(-1)
    if not is_ternary(v):
        raise ValueAlphabetError("ternary_planes expects values in {-1,0,+1}")
    pos = pack_bipolar(np.where(v == 1, 1, -1))
    neg = pack_bipolar(np.where(v == -1, 1, -1))
    return MaskedWeightPlanes(pos, neg)


def ternarize(w, t: float = DEFAULT_TERNARY_T) -> MaskedWeightPlanes:
    """Quantize a float tensor to subtractive bit-planes in natural order."""
    return ternary_planes(ternarize_values(w, t))


def binarize(w) -> BitPlane:
    """Quantize a float tensor to a single bit-plane (sign rule)."""
    return pack_bipolar(binarize_values(w).reshape(-1))


@dataclass(frozen=True)
class LayerSparsity:
    label: str
    zero_fraction: float
    pos_fraction: float
    neg_fraction: float


@dataclass(frozen=True)
class SparsityReport:
    layers: tuple

    @property
    def mean_zero_fraction(self) -> float:
        if not self.layers:
            return 0.0
        return float(np.mean([l.zero_fraction for l in self.layers]))

    def to_text(self) -> str:
        lines = [f"{'layer':<12} {'zero':>8} {'+1':>8} {'-1':>8}"]
        for l in self.layers:
            lines.append(
                f"{l.label:<12} {l.zero_fraction:>8.4f} {l.pos_fraction:>8.4f} "
                f"{l.neg_fraction:>8.4f}"
            )
        lines.append(f"mean zero fraction: {self.mean_zero_fraction:.4f}")
        return "\n".join(lines)


def sparsity(planes_by_layer: dict) -> SparsityReport:
    """Exact lane statistics of masked layers: fractions of 0 / +1 / -1.

    Expects flat planes whose lane count equals the true weight count (as
    produced by :func:`ternarize`); pad bits beyond ``n_bits`` never carry
    weight and are excluded by construction.
    """
    rows = []
    for label, planes in planes_by_layer.items():
        n = planes.n_bits
        if n == 0:
            rows.append(LayerSparsity(label, 1.0, 0.0, 0.0))
            continue
        n_pos = int(popcount_words(planes.pos.words).sum())
        n_neg = int(popcount_words(planes.neg.words).sum())
        rows.append(
            LayerSparsity(label, (n - n_pos - n_neg) / n, n_pos / n, n_neg / n)
        )
    return SparsityReport(tuple(rows))


# --------------------------------------------------------------------------- #
# bundles
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class BundleEntry:
    """Float parameters of one conv layer as supplied by training."""

    name: str
    kind: str  # "conv" | "tconv"
    weights: np.ndarray  # float32 (c_out, k_h, k_w, c_in)
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    eps: float | None = None

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None

    def bn_tuple(self) -> tuple:
        eps = DEFAULT_EPS if self.eps is None else float(self.eps)
        return (
            np.asarray(self.gamma, dtype=np.float64),
            np.asarray(self.beta, dtype=np.float64),
            np.asarray(self.mean, dtype=np.float64),
            np.asarray(self.var, dtype=np.float64),
            eps,
        )


@dataclass(eq=False)
class WeightBundle:
    entries: dict = field(default_factory=dict)

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __getitem__(self, name) -> BundleEntry:
        return self.entries[name]

    def add(self, entry: BundleEntry) -> None:
        self.entries[entry.name] = entry


@dataclass(eq=False)
class PreparedLayer:
    """One layer ready for compilation: quantized weights plus activation data.

    ``kind``: "float" (f64 weights), "binary" (dense {-1,+1} int8), or
    "masked" (dense {-1,0,+1} int8). Bit layers carry the fused integer
    threshold; ``bn``/``bias`` retain the pre-fusion parameters so reference
    paths can recompute the float batchnorm-sign exactly.
    """

    name: str
    kind: str
    weights: np.ndarray
    bias: np.ndarray | None = None
    bn: tuple | None = None
    threshold: FusedThreshold | None = None


def _expected_weight_shape(entry_spec):
    s = entry_spec.conv
    return (s.c_out, s.kernel_h, s.kernel_w, s.c_in)


def quantize_bundle(bundle: WeightBundle, config, ternary_t: float = DEFAULT_TERNARY_T) -> dict:
    """Quantize every conv in the bundle per the config's PrecisionMap.

    Returns {name: PreparedLayer} covering stem, stem2, the 12 configurable
    layers' convs, and the head. Deterministic and idempotent: rerunning on
    the same inputs yields identical payloads.
    """
    from .graph import MASKED, layer_specs

    prepared = {}
    for entry in layer_specs(config):
        if entry.kind not in ("float-conv", "bit-conv", "bit-tconv"):
            continue
        if entry.name not in bundle:
            raise BundleError(f"bundle is missing layer {entry.name!r}")
        be = bundle[entry.name]
        want_kind = "tconv" if entry.kind == "bit-tconv" else "conv"
        if be.kind != want_kind:
            raise BundleError(
                f"layer {entry.name!r} has kind {be.kind!r}, expected {want_kind!r}"
            )
        w = np.asarray(be.weights)
        want_shape = _expected_weight_shape(entry)
        if w.shape != want_shape:
            raise ShapeError(
                f"layer {entry.name!r} weights shape {w.shape}, expected {want_shape}"
            )
        if entry.has_bn != be.has_bn:
            raise BundleError(
                f"layer {entry.name!r} {'must' if entry.has_bn else 'must not'} carry batchnorm"
            )
        bias = None if be.bias is None else np.asarray(be.bias, dtype=np.float64)
        if bias is not None and bias.shape != (want_shape[0],):
            raise ShapeError(
                f"layer {entry.name!r} bias shape {bias.shape}, expected ({want_shape[0]},)"
            )
        if entry.kind == "float-conv":
            prepared[entry.name] = PreparedLayer(
                entry.name, "float", w.astype(np.float64), bias,
                be.bn_tuple() if be.has_bn else None,
            )
            continue
        # bit path: stem2 is always masked; configurable layers follow the map
        if entry.label == "stem2":
            state = MASKED
        else:
            state = config.precision.state(entry.label)
        dense = (
            ternarize_values(w, ternary_t)
            if state == MASKED
            else binarize_values(w)
        )
        bn = be.bn_tuple()
        threshold = fuse_bn_sign(*bn, bias=bias)
        prepared[entry.name] = PreparedLayer(entry.name, state, dense, bias, bn, threshold)
    return prepared


def dense_records(prepared: dict, config) -> dict:
    """Adapt PreparedLayers to the dense record layout reference code consumes."""
    records = {}
    for name, p in prepared.items():
        rec = {"w": p.weights, "bias": p.bias, "bn": p.bn}
        if p.threshold is not None:
            rec["threshold"] = (p.threshold.thresholds, p.threshold.codes)
            rec["pad_value"] = config.pad_value
        records[name] = rec
    return records


def synthesize_bundle(config, rng: np.random.Generator,
                      negative_gamma_rate: float = 0.15,
                      zero_gamma_rate: float = 0.0) -> WeightBundle:
    """Random float bundle matching a config's structure (for tests/verify).

    Batchnorm draws are scaled to each layer's accumulator range so fused
    thresholds land inside it; ``negative_gamma_rate``/``zero_gamma_rate``
    control how often a channel gets a descending or constant threshold.
    """
    from .graph import layer_specs

    bundle = WeightBundle()
    for entry in layer_specs(config):
        if entry.kind not in ("float-conv", "bit-conv", "bit-tconv"):
            continue
        s = entry.conv
        shape = (s.c_out, s.kernel_h, s.kernel_w, s.c_in)
        weights = rng.standard_normal(shape).astype(np.float32)
        k = s.kernel_h * s.kernel_w * s.c_in
        bias = (
            rng.standard_normal(s.c_out).astype(np.float32)
            if entry.has_bias
            else None
        )
        kwargs = {}
        if entry.has_bn:
            gamma = rng.uniform(0.3, 1.5, s.c_out)
            flip = rng.random(s.c_out) < negative_gamma_rate
            gamma[flip] *= -1.0
            gamma[rng.random(s.c_out) < zero_gamma_rate] = 0.0
            kwargs = dict(
                gamma=gamma.astype(np.float32),
                beta=rng.standard_normal(s.c_out).astype(np.float32),
                mean=(rng.uniform(-0.5, 0.5, s.c_out) * k).astype(np.float32),
                var=rng.uniform(0.5, max(1.0, (k / 3) ** 2), s.c_out).astype(np.float32),
                eps=DEFAULT_EPS,
            )
        bundle.add(
            BundleEntry(
                entry.name,
                "tconv" if entry.kind == "bit-tconv" else "conv",
                weights,
                bias=bias,
                **kwargs,
            )
        )
    return bundle


# --------------------------------------------------------------------------- #
# bundle disk format
# --------------------------------------------------------------------------- #


def save_bundle(bundle: WeightBundle, directory) -> None:
    """Write a bundle directory: ``manifest`` + one ``weights.bin`` f32 blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob_name = "weights.bin"
    lines = [f"{_BUNDLE_MAGIC} {_BUNDLE_VERSION}"]
    chunks = []
    offset = 0
    for name, entry in bundle.entries.items():
        co, kh, kw, ci = entry.weights.shape
        lines.append(f"layer {name} {entry.kind} {co} {kh} {kw} {ci}")
        for fname in _FIELDS:
            value = getattr(entry, "weights" if fname == "weight" else fname)
            if value is None:
                continue
            flat = np.ascontiguousarray(value, dtype="<f4").reshape(-1)
            lines.append(f"data {fname} {blob_name} {offset} {flat.size}")
            chunks.append(flat.tobytes())
            offset += flat.nbytes
        if entry.eps is not None:
            lines.append(f"eps {entry.eps!r}")
        lines.append("end")
    (directory / blob_name).write_bytes(b"".join(chunks))
    (directory / "manifest").write_text("\n".join(lines) + "\n")


def _parse_scalar(token, line_no, what, kind=float):
    try:
        return kind(token)
    except ValueError:
        raise BundleError(f"bad {what} {token!r}", where=f"manifest line {line_no}") from None


def load_bundle(directory) -> WeightBundle:
    """Parse a bundle directory; malformed input raises BundleError with a
    manifest line number (or blob file name) identifying the problem."""
    directory = Path(directory)
    manifest = directory / "manifest"
    if not manifest.is_file():
        raise BundleError(f"no manifest in {directory}", where=str(directory))
    blobs = {}

    def blob(fname, line_no):
        if fname not in blobs:
            path = directory / fname
            if not path.is_file():
                raise BundleError(f"missing blob file {fname!r}", where=f"manifest line {line_no}")
            blobs[fname] = np.frombuffer(path.read_bytes(), dtype="<f4")
        return blobs[fname]

    bundle = WeightBundle()
    current = None  # (line_no, name, kind, shape, fields dict, eps)
    seen = set()
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split() != [_BUNDLE_MAGIC, str(_BUNDLE_VERSION)]:
        raise BundleError(
            f"manifest must open with {_BUNDLE_MAGIC!r} {_BUNDLE_VERSION}",
            where="manifest line 1",
        )
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]
        if key == "layer":
            if current is not None:
                raise BundleError("nested layer record", where=f"manifest line {line_no}")
            if len(tokens) != 7:
                raise BundleError(
                    "layer line needs: layer <name> <kind> <c_out> <k_h> <k_w> <c_in>",
                    where=f"manifest line {line_no}",
                )
            name, kind = tokens[1], tokens[2]
            if kind not in ("conv", "tconv"):
                raise BundleError(f"unknown layer kind {kind!r}", where=f"manifest line {line_no}")
            if name in seen:
                raise BundleError(f"duplicate layer {name!r}", where=f"manifest line {line_no}")
            dims = [_parse_scalar(tk, line_no, "dimension", int) for tk in tokens[3:]]
            if min(dims) < 1:
                raise BundleError(f"nonpositive dimension in {dims}", where=f"manifest line {line_no}")
            current = [line_no, name, kind, tuple(dims), {}, None]
        elif key == "data":
            if current is None:
                raise BundleError("data line outside a layer record", where=f"manifest line {line_no}")
            if len(tokens) != 5:
                raise BundleError(
                    "data line needs: data <field> <blob> <offset> <count>",
                    where=f"manifest line {line_no}",
                )
            fname = tokens[1]
            if fname not in _FIELDS:
                raise BundleError(f"unknown field {fname!r}", where=f"manifest line {line_no}")
            if fname in current[4]:
                raise BundleError(f"duplicate field {fname!r}", where=f"manifest line {line_no}")
            off = _parse_scalar(tokens[3], line_no, "offset", int)
            count = _parse_scalar(tokens[4], line_no, "count", int)
            co, kh, kw, ci = current[3]
            want = co * kh * kw * ci if fname == "weight" else co
            if count != want:
                raise BundleError(
                    f"field {fname!r} expects {want} values, manifest says {count}",
                    where=f"manifest line {line_no}",
                )
            data = blob(tokens[2], line_no)
            if off % 4 or off // 4 + count > data.size:
                raise BundleError(
                    f"field {fname!r} spans [{off}, {off + 4 * count}) bytes, "
                    f"blob {tokens[2]!r} holds {4 * data.size}",
                    where=f"manifest line {line_no}",
                )
            current[4][fname] = data[off // 4 : off // 4 + count]
        elif key == "eps":
            if current is None:
                raise BundleError("eps line outside a layer record", where=f"manifest line {line_no}")
            if len(tokens) != 2:
                raise BundleError("eps line needs one value", where=f"manifest line {line_no}")
            current[5] = _parse_scalar(tokens[1], line_no, "eps")
        elif key == "end":
            if current is None:
                raise BundleError("end without a layer record", where=f"manifest line {line_no}")
            line0, name, kind, (co, kh, kw, ci), fields, eps = current
            if "weight" not in fields:
                raise BundleError(
                    f"layer {name!r} has no weight field", where=f"manifest line {line0}"
                )
            bn_fields = [f for f in ("gamma", "beta", "mean", "var") if f in fields]
            if bn_fields and len(bn_fields) != 4:
                raise BundleError(
                    f"layer {name!r} has partial batchnorm fields {bn_fields}",
                    where=f"manifest line {line0}",
                )
            if "var" in fields and np.any(fields["var"] < 0):
                raise BundleError(
                    f"layer {name!r} has negative variance", where=f"manifest line {line0}"
                )
            bundle.add(
                BundleEntry(
                    name,
                    kind,
                    fields["weight"].reshape(co, kh, kw, ci),
                    bias=fields.get("bias"),
                    gamma=fields.get("gamma"),
                    beta=fields.get("beta"),
                    mean=fields.get("mean"),
                    var=fields.get("var"),
                    eps=eps,
                )
            )
            seen.add(name)
            current = None
        else:
            raise BundleError(f"unknown directive {key!r}", where=f"manifest line {line_no}")
    if current is not None:
        raise BundleError("unterminated layer record", where=f"manifest line {current[0]}")
    return bundle
