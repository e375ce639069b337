"""The quantized segmentation U-Net: configuration, build, and forward.

Topology (input to output): a full-precision stem conv (BN + sign), a second
conv ("stem2", masked-binary by default, full-precision selectable), four
encoder stages of 2x2 max-pool followed by a double conv, four decoder stages
of 2x2-stride-2 transposed conv (BN + sign) -> skip concatenation -> double
conv, and a full-precision 1x1 head producing logits. The 12 configurable
layers (four encoder double convs, four transposed convs, four decoder double
convs) each run Binary ({-1,+1} weights) or Masked ({-1,0,+1} weights) per a
:class:`PrecisionMap`; both halves of a double conv share their stage's state.

The default channel schedule (stem 64; encoder 128/256/512/512; transposed
convs 384/192/96/48; decoder 256/128/64/64) lands at 14.04M parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .bitcore import BitTensor, ChannelSegment, unpack_tensor
from .errors import ShapeError, UnsupportedConfigError
from .layers import (
    ConvSpec,
    FusedThreshold,
    apply_threshold,
    concat_channels,
    conv_forward,
    float_bn_sign,
    float_conv,
    maxpool2,
    pack_conv_weights,
    segment_lanes,
    transposed_conv_forward,
)

__all__ = [
    "CONFIGURABLE_LABELS",
    "ALL_LABELS",
    "PrecisionMap",
    "UNetConfig",
    "LayerSpecEntry",
    "layer_specs",
    "validate",
    "scale_config",
    "input_segments",
    "build",
    "forward",
    "CompiledModel",
    "CompiledLayer",
    "ForwardResult",
]

CONFIGURABLE_LABELS = (
    "down-C1", "down-C2", "down-C3", "down-C4",
    "up-CT1", "up-CT2", "up-CT3", "up-CT4",
    "up-C1", "up-C2", "up-C3", "up-C4",
)
ALL_LABELS = ("stem", "stem2") + CONFIGURABLE_LABELS + ("head",)

BINARY = "binary"
MASKED = "masked"


@dataclass(frozen=True)
class PrecisionMap:
    """Binary/Masked assignment for the 12 configurable layers.

    Equivalent to a 12-bit ConfigId: bit i (LSB first) corresponds to
    CONFIGURABLE_LABELS[i] and a set bit means Masked.
    """

    masked_labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        labels = frozenset(self.masked_labels)
        object.__setattr__(self, "masked_labels", labels)
        unknown = labels - set(CONFIGURABLE_LABELS)
        if unknown:
            raise UnsupportedConfigError(f"unknown configurable labels: {sorted(unknown)}")

    @classmethod
    def all_masked(cls) -> "PrecisionMap":
        return cls(frozenset(CONFIGURABLE_LABELS))

    @classmethod
    def all_binary(cls) -> "PrecisionMap":
        return cls(frozenset())

    @classmethod
    def from_config_id(cls, config_id: int) -> "PrecisionMap":
        if not 0 <= config_id < 4096:
            raise UnsupportedConfigError(f"config id {config_id} outside [0, 4095]")
        return cls(
            frozenset(
                label for i, label in enumerate(CONFIGURABLE_LABELS) if config_id >> i & 1
            )
        )

    def config_id(self) -> int:
        return sum(
            1 << i for i, label in enumerate(CONFIGURABLE_LABELS) if label in self.masked_labels
        )

    def state(self, label: str) -> str:
        if label not in CONFIGURABLE_LABELS:
            raise UnsupportedConfigError(f"{label!r} is not a configurable layer")
        return MASKED if label in self.masked_labels else BINARY

    def masked_count(self) -> int:
        return len(self.masked_labels)


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters plus the per-layer precision assignment."""

    in_channels: int = 3
    height: int = 512
    width: int = 512
    stem_channels: int = 64
    encoder_channels: tuple = (128, 256, 512, 512)
    tconv_channels: tuple = (384, 192, 96, 48)
    decoder_channels: tuple = (256, 128, 64, 64)
    out_channels: int = 1
    precision: PrecisionMap = field(default_factory=PrecisionMap.all_masked)
    stem2_float: bool = False
    pad_mode: str = "neg_one"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "tconv_channels", tuple(self.tconv_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))

    @property
    def pad_value(self) -> int:
        return 0 if self.pad_mode == "zero" else -1


def validate(config: UNetConfig) -> list:
    """Return a list of constraint violations (empty when the config is valid)."""
    problems = []
    if config.height <= 0 or config.width <= 0:
        problems.append(f"extent {config.height}x{config.width} must be positive")
    else:
        if config.height % 16 or config.width % 16:
            problems.append(
                f"extent {config.height}x{config.width} must be divisible by 16 "
                "(four 2x downsamplings)"
            )
    for name in ("encoder_channels", "tconv_channels", "decoder_channels"):
        values = getattr(config, name)
        if len(values) != 4:
            problems.append(f"{name} must list 4 stages, got {len(values)}")
        elif any(int(v) <= 0 for v in values):
            problems.append(f"{name} must be positive, got {values}")
    for name in ("in_channels", "stem_channels", "out_channels"):
        if getattr(config, name) <= 0:
            problems.append(f"{name} must be positive")
    if config.pad_mode not in ("neg_one", "zero"):
        problems.append(f"unknown pad_mode {config.pad_mode!r}")
    elif config.pad_mode == "zero":
        # transposed convs never pad, and stem2 is always masked (or float),
        # so only Binary-state double convs are inexpressible under zero-padding
        binary = [l for l in CONFIGURABLE_LABELS if not l.startswith("up-CT")
                  and config.precision.state(l) == BINARY]
        if binary:
            problems.append(
                f"pad_mode 'zero' requires masked weights, but {binary} are binary"
            )
    return problems


def scale_config(config: UNetConfig, divisor: int) -> UNetConfig:
    """Shrink every channel width by an integer divisor (for test-scale models)."""
    if divisor < 1 or config.stem_channels % divisor:
        raise UnsupportedConfigError(f"divisor {divisor} must divide the schedule")

    def shrink(values):
        scaled = tuple(max(1, v // divisor) for v in values)
        if any(v % divisor for v in values):
            raise UnsupportedConfigError(f"divisor {divisor} must divide the schedule")
        return scaled

    return replace(
        config,
        stem_channels=config.stem_channels // divisor,
        encoder_channels=shrink(config.encoder_channels),
        tconv_channels=shrink(config.tconv_channels),
        decoder_channels=shrink(config.decoder_channels),
    )


# --------------------------------------------------------------------------- #
# structural walk
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LayerSpecEntry:
    """One executable step: name, kind, geometry, and wiring.

    ``kind``: float-conv | bit-conv | bit-tconv | maxpool | concat.
    ``label`` names the owning configurable layer (None for fixed layers).
    ``scale`` is the spatial downscale factor of the step's input;
    ``concat_with`` names the skip source output for concat steps;
    ``has_bias``/``has_bn`` describe the expected bundle payload.
    """

    name: str
    kind: str
    label: str = ""
    conv: ConvSpec | None = None
    scale: int = 1
    concat_with: str = ""
    has_bn: bool = True
    has_bias: bool = False


def layer_specs(config: UNetConfig) -> tuple:
    """Execution-ordered structural description; single source of truth for
    the builder, the planner, the bundle synthesizer, and serialization."""
    e = (config.stem_channels,) + config.encoder_channels  # e0..e4
    t = config.tconv_channels
    u = config.decoder_channels
    pad_mode = config.pad_mode
    entries = [
        LayerSpecEntry(
            "stem", "float-conv", "stem",
            ConvSpec(3, 3, 1, 1, config.in_channels, e[0]), 1, has_bias=True,
        ),
        LayerSpecEntry(
            "stem2", "float-conv" if config.stem2_float else "bit-conv", "stem2",
            ConvSpec(3, 3, 1, 1, e[0], e[0], pad_mode=pad_mode), 1,
            has_bias=config.stem2_float,
        ),
    ]
    for i in range(1, 5):
        scale = 1 << i
        entries.append(LayerSpecEntry(f"pool{i}", "maxpool", scale=scale >> 1, has_bn=False))
        entries.append(
            LayerSpecEntry(
                f"down-C{i}.a", "bit-conv", f"down-C{i}",
                ConvSpec(3, 3, 1, 1, e[i - 1], e[i], pad_mode=pad_mode), scale,
            )
        )
        entries.append(
            LayerSpecEntry(
                f"down-C{i}.b", "bit-conv", f"down-C{i}",
                ConvSpec(3, 3, 1, 1, e[i], e[i], pad_mode=pad_mode), scale,
            )
        )
    skip_sources = ["stem2", "down-C1.b", "down-C2.b", "down-C3.b"]
    skip_channels = [e[0], e[1], e[2], e[3]]
    src = e[4]
    for i in range(1, 5):
        scale = 1 << (4 - i)
        entries.append(
            LayerSpecEntry(
                f"up-CT{i}", "bit-tconv", f"up-CT{i}",
                ConvSpec(2, 2, 2, 0, src, t[i - 1]), scale * 2,
            )
        )
        entries.append(
            LayerSpecEntry(
                f"concat{i}", "concat", scale=scale,
                concat_with=skip_sources[4 - i], has_bn=False,
            )
        )
        cat_c = t[i - 1] + skip_channels[4 - i]
        entries.append(
            LayerSpecEntry(
                f"up-C{i}.a", "bit-conv", f"up-C{i}",
                ConvSpec(3, 3, 1, 1, cat_c, u[i - 1], pad_mode=pad_mode), scale,
            )
        )
        entries.append(
            LayerSpecEntry(
                f"up-C{i}.b", "bit-conv", f"up-C{i}",
                ConvSpec(3, 3, 1, 1, u[i - 1], u[i - 1], pad_mode=pad_mode), scale,
            )
        )
        src = u[i - 1]
    entries.append(
        LayerSpecEntry(
            "head", "float-conv", "head",
            ConvSpec(1, 1, 1, 0, u[3], config.out_channels), 1,
            has_bn=False, has_bias=True,
        )
    )
    return tuple(entries)


# --------------------------------------------------------------------------- #
# compile
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class CompiledLayer:
    """An executable layer: packed/float weights plus activation parameters.

    ``kind``: float-conv | binary-conv | masked-conv | binary-tconv |
    masked-tconv | maxpool | concat (the model-file kind vocabulary).
    """

    name: str
    kind: str
    spec: ConvSpec | None = None
    weights: object = None  # BitPlane | MaskedWeightPlanes | float64 ndarray
    bias: np.ndarray | None = None
    bn: tuple | None = None  # (gamma, beta, mean, var, eps) for float+sign layers
    threshold: FusedThreshold | None = None
    concat_with: str = ""
    apply_sign: bool = False


@dataclass(frozen=True, eq=False)
class CompiledModel:
    config: UNetConfig
    layers: tuple


def _concat_segments(a: tuple, b: tuple) -> tuple:
    shift = segment_lanes(a)
    return a + tuple(ChannelSegment(s.lane_offset + shift, s.count) for s in b)


def input_segments(config: UNetConfig) -> dict:
    """Per-pixel channel segment layout of each layer's *input*, by name.

    Convs (and the head) emit a single fresh segment; concat appends the
    skip source's segments after the current ones with block-aligned lane
    offsets. Weight packing and dense weight recovery both key off this.
    """
    table = {}
    seg_out = {}  # output layout per producing layer name
    current = ()
    for entry in layer_specs(config):
        table[entry.name] = current
        if entry.conv is not None:
            current = (ChannelSegment(0, entry.conv.c_out),)
        elif entry.kind == "concat":
            current = _concat_segments(current, seg_out[entry.concat_with])
        seg_out[entry.name] = current
    return table


def build(config: UNetConfig, bundle, ternary_t: float | None = None) -> CompiledModel:
    """Quantize a weight bundle per the config and compile the layer list.

    Weight planes are packed against exactly the input lane layout the
    runtime will gather (see :func:`input_segments`). ``ternary_t`` overrides
    the masked-quantization threshold factor (None keeps the default).
    """
    problems = validate(config)
    if problems:
        raise UnsupportedConfigError("; ".join(problems))
    from .quantizer import quantize_bundle

    if ternary_t is None:
        prepared = quantize_bundle(bundle, config)
    else:
        prepared = quantize_bundle(bundle, config, ternary_t)
    segments_in = input_segments(config)
    compiled = []
    for entry in layer_specs(config):
        if entry.kind == "float-conv":
            p = prepared[entry.name]
            sign = entry.name != "head"
            compiled.append(
                CompiledLayer(
                    entry.name, "float-conv", entry.conv,
                    weights=p.weights, bias=p.bias, bn=p.bn, apply_sign=sign,
                )
            )
        elif entry.kind in ("bit-conv", "bit-tconv"):
            p = prepared[entry.name]
            planes = pack_conv_weights(
                p.weights, segments_in[entry.name], masked=p.kind == MASKED
            )
            suffix = "conv" if entry.kind == "bit-conv" else "tconv"
            compiled.append(
                CompiledLayer(
                    entry.name, f"{p.kind}-{suffix}", entry.conv,
                    weights=planes, threshold=p.threshold,
                )
            )
        elif entry.kind == "maxpool":
            compiled.append(CompiledLayer(entry.name, "maxpool"))
        elif entry.kind == "concat":
            compiled.append(
                CompiledLayer(entry.name, "concat", concat_with=entry.concat_with)
            )
        else:  # pragma: no cover - layer_specs emits only the kinds above
            raise UnsupportedConfigError(f"unknown layer kind {entry.kind!r}")
    return CompiledModel(config, tuple(compiled))


# --------------------------------------------------------------------------- #
# execute
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ForwardResult:
    logits: np.ndarray
    mask: np.ndarray
    trace: dict | None = None


def forward(model: CompiledModel, image: np.ndarray, threads: int = 1,
            trace: bool = False) -> ForwardResult:
    """Run the compiled network on an (n, h, w, c) image.

    The mask is logits >= 0 per channel (identical to sigmoid(logits) >= 0.5).
    With ``trace=True`` the result carries {name: {"acc", "out"}} for every
    layer: integer accumulators and packed outputs for bit layers, float
    arrays for the endpoints.
    """
    cfg = model.config
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 4 or image.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
        raise ShapeError(
            f"image shape {image.shape} != (n, {cfg.height}, {cfg.width}, {cfg.in_channels})"
        )
    notes = {} if trace else None
    outputs = {}
    x = image
    logits = None
    for layer in model.layers:
        acc = None
        if layer.kind == "float-conv":
            dense = unpack_tensor(x).astype(np.float64) if isinstance(x, BitTensor) else x
            acc = float_conv(dense, layer.weights, layer.bias, layer.spec)
            if layer.apply_sign:
                x = float_bn_sign(acc, *layer.bn)
            else:
                x = acc
                logits = acc
        elif layer.kind in ("binary-conv", "masked-conv"):
            acc = conv_forward(x, layer.weights, layer.spec, threads=threads)
            x = apply_threshold(acc, layer.threshold)
        elif layer.kind in ("binary-tconv", "masked-tconv"):
            acc = transposed_conv_forward(x, layer.weights, layer.spec, threads=threads)
            x = apply_threshold(acc, layer.threshold)
        elif layer.kind == "maxpool":
            x = maxpool2(x)
        elif layer.kind == "concat":
            x = concat_channels(x, outputs[layer.concat_with])
        outputs[layer.name] = x
        if notes is not None:
            notes[layer.name] = {"acc": acc, "out": x}
    mask = (logits >= 0.0).astype(np.uint8)
    if notes is not None:
        notes["mask"] = mask
    return ForwardResult(logits, mask, notes)
