"""Binary model/tensor serialization: round trips and corruption handling."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from bitunet.bitcore import BitPlane, BitTensor, MaskedWeightPlanes, pack_tensor, unpack_tensor
from bitunet.errors import FormatError
from bitunet.graph import PrecisionMap, build, forward
from bitunet.modelfile import KIND_CODES, read_model, read_tensor, write_model, write_tensor
from bitunet.quantizer import synthesize_bundle

from conftest import tiny_config

# --------------------------------------------------------------------------- #
# model round trips
# --------------------------------------------------------------------------- #


def _layers_equal(a, b) -> bool:
    if (a.name, a.kind, a.concat_with, a.apply_sign) != (b.name, b.kind, b.concat_with, b.apply_sign):
        return False
    if (a.spec is None) != (b.spec is None):
        return False
    if a.spec is not None and a.spec != b.spec:
        return False
    if isinstance(a.weights, MaskedWeightPlanes):
        if not isinstance(b.weights, MaskedWeightPlanes):
            return False
        pairs = [(a.weights.pos, b.weights.pos), (a.weights.neg, b.weights.neg)]
    elif isinstance(a.weights, BitPlane):
        pairs = [(a.weights, b.weights)]
    else:
        pairs = []
        if (a.weights is None) != (b.weights is None):
            return False
        if a.weights is not None and not np.array_equal(a.weights, b.weights):
            return False
    for pa, pb in pairs:
        if pa.n_bits != pb.n_bits or not np.array_equal(pa.words, pb.words):
            return False
    for field in ("bias",):
        va, vb = getattr(a, field), getattr(b, field)
        if (va is None) != (vb is None) or (va is not None and not np.array_equal(va, vb)):
            return False
    if (a.bn is None) != (b.bn is None):
        return False
    if a.bn is not None and not all(np.array_equal(x, y) for x, y in zip(a.bn, b.bn)):
        return False
    if (a.threshold is None) != (b.threshold is None):
        return False
    if a.threshold is not None:
        if not np.array_equal(a.threshold.thresholds, b.threshold.thresholds):
            return False
        if not np.array_equal(a.threshold.codes, b.threshold.codes):
            return False
    return True


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"precision": PrecisionMap.all_binary()},
        {"precision": PrecisionMap.from_config_id(0x5A5)},
        {"stem2_float": True},
        {"pad_mode": "zero"},
    ],
    ids=["all-masked", "all-binary", "mixed", "stem2-float", "zero-pad"],
)
def test_model_round_trip(rng, tmp_path, overrides):
    cfg = tiny_config(extent=16, **overrides)
    model = build(cfg, synthesize_bundle(cfg, rng))
    path = tmp_path / "model.mbun"
    write_model(model, path)
    loaded = read_model(path)
    assert loaded.config == cfg
    assert len(loaded.layers) == len(model.layers)
    for a, b in zip(model.layers, loaded.layers):
        assert _layers_equal(a, b), a.name
    image = rng.random(size=(1, 16, 16, 3))
    assert np.array_equal(forward(loaded, image).logits, forward(model, image).logits)


def test_model_rewrite_is_byte_identical(rng, tmp_path):
    cfg = tiny_config(extent=16)
    model = build(cfg, synthesize_bundle(cfg, rng))
    write_model(model, tmp_path / "a.mbun")
    write_model(read_model(tmp_path / "a.mbun"), tmp_path / "b.mbun")
    assert (tmp_path / "a.mbun").read_bytes() == (tmp_path / "b.mbun").read_bytes()


# --------------------------------------------------------------------------- #
# model corruption
# --------------------------------------------------------------------------- #


@pytest.fixture(scope="module")
def model_bytes(tmp_path_factory):
    rng = np.random.default_rng(123)
    cfg = tiny_config(extent=16)
    model = build(cfg, synthesize_bundle(cfg, rng))
    path = tmp_path_factory.mktemp("mf") / "model.mbun"
    write_model(model, path)
    return path.read_bytes()


def _read_bytes(tmp_path, data: bytes):
    path = tmp_path / "case.mbun"
    path.write_bytes(data)
    return read_model(path)


def test_model_bad_magic(tmp_path, model_bytes):
    with pytest.raises(FormatError, match="magic"):
        _read_bytes(tmp_path, b"XBUN" + model_bytes[4:])


def test_model_bad_version(tmp_path, model_bytes):
    data = model_bytes[:4] + struct.pack("<I", 9) + model_bytes[8:]
    with pytest.raises(FormatError, match="version"):
        _read_bytes(tmp_path, data)


def test_model_truncation_reports_offset(tmp_path, model_bytes):
    cut = len(model_bytes) // 2
    with pytest.raises(FormatError, match="byte") as info:
        _read_bytes(tmp_path, model_bytes[:cut])
    assert "truncated" in str(info.value)


def test_model_trailing_bytes(tmp_path, model_bytes):
    with pytest.raises(FormatError, match="trailing"):
        _read_bytes(tmp_path, model_bytes + b"\x00\x01")


def test_model_precision_top_bits(tmp_path, model_bytes):
    # the u16 precision id sits right after the three 4-stage schedules
    off = 8 + 20 + 48
    data = model_bytes[:off] + struct.pack("<H", 0xFFFF) + model_bytes[off + 2 :]
    with pytest.raises(FormatError, match="top bits"):
        _read_bytes(tmp_path, data)


def test_model_bad_sign_convention(tmp_path, model_bytes):
    off = 8 + 20 + 48 + 2 + 1  # sign byte follows the pad byte
    data = model_bytes[:off] + b"\x00" + model_bytes[off + 1 :]
    with pytest.raises(FormatError, match="convention"):
        _read_bytes(tmp_path, data)


def test_model_unknown_kind_code(tmp_path, model_bytes):
    marker = struct.pack("<H", 5) + b"pool1"
    at = model_bytes.index(marker) + len(marker)
    data = model_bytes[:at] + b"\xee" + model_bytes[at + 1 :]
    with pytest.raises(FormatError, match="kind code"):
        _read_bytes(tmp_path, data)


def _config_block() -> bytes:
    out = b"MBUN" + struct.pack("<I", 1)
    out += struct.pack("<5I", 16, 16, 3, 1, 16)
    out += struct.pack("<4I", 32, 64, 128, 128)
    out += struct.pack("<4I", 96, 48, 24, 12)
    out += struct.pack("<4I", 64, 32, 16, 16)
    out += struct.pack("<H4B", 4095, 0, 1, 0, 0)
    return out


def _layer_head(name: str, kind: str, spec=(3, 3, 1, 1, 16, 1)) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<B", KIND_CODES[kind]) + struct.pack("<6I", *spec)


def test_model_rejects_garbage_pad_bits(tmp_path):
    # a 5-bit plane whose word sets a lane past n_bits
    plane = struct.pack("<Q", 5) + struct.pack("<Q", 1 << 60)
    data = _config_block() + struct.pack("<I", 1) + _layer_head("x", "binary-conv") + plane
    with pytest.raises(FormatError, match="inconsistent"):
        _read_bytes(tmp_path, data)


def test_model_rejects_bad_threshold_code(tmp_path):
    plane = struct.pack("<Q", 5) + struct.pack("<Q", 0b10110)
    thresh = struct.pack("<iB", 3, 9)  # code 9 does not exist
    data = _config_block() + struct.pack("<I", 1) + _layer_head("x", "binary-conv") + plane + thresh
    with pytest.raises(FormatError, match="inconsistent"):
        _read_bytes(tmp_path, data)


def test_model_rejects_absurd_plane_size(tmp_path):
    plane = struct.pack("<Q", 1 << 40)  # words cannot possibly follow
    data = _config_block() + struct.pack("<I", 1) + _layer_head("x", "binary-conv") + plane
    with pytest.raises(FormatError, match="truncated"):
        _read_bytes(tmp_path, data)


# --------------------------------------------------------------------------- #
# raw tensors
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int32])
def test_tensor_round_trip_dense(rng, tmp_path, dtype):
    value = (rng.random(size=(2, 3, 4)) * 100).astype(dtype)
    path = tmp_path / "t.rten"
    write_tensor(path, value)
    got = read_tensor(path)
    assert got.dtype == np.dtype(dtype)
    assert np.array_equal(got, value)


def test_tensor_round_trip_bit_packed(rng, tmp_path):
    dense = rng.choice((-1, 1), size=(2, 3, 3, 70)).astype(np.int8)
    t = pack_tensor(dense)
    path = tmp_path / "t.rten"
    write_tensor(path, t)
    got = read_tensor(path)
    assert isinstance(got, BitTensor)
    assert (got.n, got.h, got.w, got.c) == (2, 3, 3, 70)
    assert np.array_equal(unpack_tensor(got), dense)


def test_tensor_rank_zero(tmp_path):
    write_tensor(tmp_path / "s.rten", np.float64(2.5))
    assert read_tensor(tmp_path / "s.rten") == 2.5


def test_tensor_rejects_multi_segment(rng, tmp_path):
    from bitunet.layers import concat_channels

    a = pack_tensor(rng.choice((-1, 1), size=(1, 2, 2, 5)).astype(np.int8))
    b = pack_tensor(rng.choice((-1, 1), size=(1, 2, 2, 7)).astype(np.int8))
    with pytest.raises(FormatError, match="single-segment"):
        write_tensor(tmp_path / "t.rten", concat_channels(a, b))


def test_tensor_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(FormatError, match="dtype"):
        write_tensor(tmp_path / "t.rten", np.zeros(3, dtype=np.int8))


def test_tensor_read_errors(rng, tmp_path):
    path = tmp_path / "t.rten"
    write_tensor(path, np.zeros((2, 2), dtype=np.float32))
    data = path.read_bytes()

    (tmp_path / "bad.rten").write_bytes(b"XTEN" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        read_tensor(tmp_path / "bad.rten")

    (tmp_path / "bad.rten").write_bytes(data[:8] + b"\x07" + data[9:])
    with pytest.raises(FormatError, match="dtype code"):
        read_tensor(tmp_path / "bad.rten")

    (tmp_path / "bad.rten").write_bytes(data + b"!")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(tmp_path / "bad.rten")

    (tmp_path / "bad.rten").write_bytes(data[:-1])
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(tmp_path / "bad.rten")


def test_tensor_bit_packed_lane_check(rng, tmp_path):
    dense = rng.choice((-1, 1), size=(1, 1, 1, 5)).astype(np.int8)
    path = tmp_path / "t.rten"
    write_tensor(path, pack_tensor(dense))
    data = bytearray(path.read_bytes())
    data[-1] |= 0x80  # set a pad lane in the last word
    (tmp_path / "bad.rten").write_bytes(bytes(data))
    with pytest.raises(FormatError, match="pad"):
        read_tensor(tmp_path / "bad.rten")


def test_tensor_bit_packed_requires_rank_four(tmp_path):
    data = b"RTEN" + struct.pack("<I", 1) + struct.pack("<BBH", 3, 2, 0) + struct.pack("<2Q", 2, 2)
    (tmp_path / "bad.rten").write_bytes(data)
    with pytest.raises(FormatError, match="rank 4"):
        read_tensor(tmp_path / "bad.rten")
