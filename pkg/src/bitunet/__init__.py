"""Bit-packed masked-binary U-Net inference engine and analysis toolkit.

Activations are bipolar (+1/-1) values packed one bit per lane; weights are
binary (one plane) or masked ternary (a positive and a negative plane whose
difference encodes {-1, 0, +1}). Convolutions lower to XOR/popcount matrix
products over 128-bit channel blocks, batchnorm + sign folds into per-channel
integer thresholds, and a planner ranks the 12 configurable layers by a
weighted op/parameter cost to decide which ones earn the masked encoding.

Subpackages: :mod:`bitunet.bitcore` (packing and bit dot products),
:mod:`bitunet.layers` (conv/pool/concat/threshold lowering),
:mod:`bitunet.graph` (network assembly and execution),
:mod:`bitunet.planner` (cost scores, sweeps, marginal analysis),
:mod:`bitunet.quantizer` (float-to-bit conversion and weight bundles),
:mod:`bitunet.modelfile` (model/tensor serialization),
:mod:`bitunet.oracle` (dense exact references), :mod:`bitunet.verify`
(equivalence driver), :mod:`bitunet.bench` (throughput comparisons),
:mod:`bitunet.cli` (command-line surface).
"""

__version__ = "0.1.0"

from .bitcore import (
    BitPlane,
    BitTensor,
    ChannelSegment,
    MaskedWeightPlanes,
    PackedBitMatrix,
    bit_gemm,
    dot_binary,
    dot_masked,
    pack_bipolar,
    pack_tensor,
    unpack_bipolar,
    unpack_tensor,
)
from .errors import (
    BundleError,
    EngineError,
    FormatError,
    LayoutError,
    PlaneOverlapError,
    ShapeError,
    UnsupportedConfigError,
    ValueAlphabetError,
)
from .graph import (
    CONFIGURABLE_LABELS,
    CompiledModel,
    ForwardResult,
    PrecisionMap,
    UNetConfig,
    build,
    forward,
    scale_config,
    validate,
)
from .layers import (
    ConvSpec,
    FusedThreshold,
    apply_threshold,
    concat_channels,
    conv_forward,
    fuse_bn_sign,
    maxpool2,
    pack_conv_weights,
    transposed_conv_forward,
    unpack_conv_weights,
)
from .modelfile import read_model, read_tensor, write_model, write_tensor
from .planner import (
    CostReport,
    ResultsTable,
    cost_scores,
    count_ops,
    count_params,
    enumerate_configs,
    marginal_contribution,
    parse_results_csv,
    select_mask_plan,
    total_params,
)
from .quantizer import (
    BundleEntry,
    WeightBundle,
    binarize,
    load_bundle,
    quantize_bundle,
    save_bundle,
    synthesize_bundle,
    ternarize,
)

__all__ = [
    "__version__",
    # bitcore
    "BitPlane", "BitTensor", "ChannelSegment", "MaskedWeightPlanes",
    "PackedBitMatrix", "bit_gemm", "dot_binary", "dot_masked",
    "pack_bipolar", "pack_tensor", "unpack_bipolar", "unpack_tensor",
    # errors
    "BundleError", "EngineError", "FormatError", "LayoutError",
    "PlaneOverlapError", "ShapeError", "UnsupportedConfigError",
    "ValueAlphabetError",
    # graph
    "CONFIGURABLE_LABELS", "CompiledModel", "ForwardResult", "PrecisionMap",
    "UNetConfig", "build", "forward", "scale_config", "validate",
    # layers
    "ConvSpec", "FusedThreshold", "apply_threshold", "concat_channels",
    "conv_forward", "fuse_bn_sign", "maxpool2", "pack_conv_weights",
    "transposed_conv_forward", "unpack_conv_weights",
    # modelfile
    "read_model", "read_tensor", "write_model", "write_tensor",
    # planner
    "CostReport", "ResultsTable", "cost_scores", "count_ops", "count_params",
    "enumerate_configs", "marginal_contribution", "parse_results_csv",
    "select_mask_plan", "total_params",
    # quantizer
    "BundleEntry", "WeightBundle", "binarize", "load_bundle",
    "quantize_bundle", "save_bundle", "synthesize_bundle", "ternarize",
]
