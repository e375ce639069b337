"""Quantization rules, weight bundles, and the bundle disk format."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitunet.bitcore import unpack_bipolar
from bitunet.errors import BundleError, ShapeError, ValueAlphabetError
from bitunet.graph import PrecisionMap, layer_specs
from bitunet.quantizer import (
    BundleEntry,
    WeightBundle,
    binarize_values,
    is_bipolar,
    is_ternary,
    load_bundle,
    quantize_bundle,
    save_bundle,
    sparsity,
    synthesize_bundle,
    ternarize,
    ternarize_values,
    ternary_planes,
)

from conftest import tiny_config

# --------------------------------------------------------------------------- #
# value quantization
# --------------------------------------------------------------------------- #


def test_alphabet_predicates():
    assert is_ternary(np.array([-1, 0, 1, 1]))
    assert not is_ternary(np.array([-1, 0.5]))
    assert is_bipolar(np.array([-1, 1, 1]))
    assert not is_bipolar(np.array([-1, 0, 1]))
    assert is_ternary(np.array([]))  # vacuous


@given(
    st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=1, max_size=40),
    st.floats(min_value=0.0, max_value=2.0),
)
@settings(max_examples=60)
def test_ternarize_values_threshold_rule(values, t):
    w = np.array(values)
    out = ternarize_values(w, t)
    delta = t * np.abs(w).mean()
    assert np.array_equal(out, np.where(w > delta, 1, np.where(w < -delta, -1, 0)))
    assert out.dtype == np.int8


def test_ternarize_passes_through_exact_ternary():
    w = np.array([-1.0, 0.0, 1.0, 1.0])
    # a fresh threshold would zero the +-1s (delta = 0.7 * 0.75 > nothing),
    # but exact ternary input is kept verbatim
    assert np.array_equal(ternarize_values(w, 10.0), w.astype(np.int8))


def test_ternarize_validation():
    with pytest.raises(ShapeError):
        ternarize_values(np.array([]))
    with pytest.raises(ValueAlphabetError):
        ternarize_values(np.array([0.5]), t=-0.1)


def test_binarize_sign_of_zero_is_positive():
    w = np.array([-0.75, -0.0, 0.0, 0.25])
    assert binarize_values(w).tolist() == [-1, 1, 1, 1]
    with pytest.raises(ShapeError):
        binarize_values(np.array([]))


def test_ternary_planes_round_trip(rng):
    v = rng.choice((-1, 0, 1), size=47).astype(np.int8)
    planes = ternary_planes(v)
    assert planes.n_bits == 47
    pos = unpack_bipolar(planes.pos) == 1
    neg = unpack_bipolar(planes.neg) == 1
    assert np.array_equal(pos.astype(np.int8) - neg.astype(np.int8), v)
    with pytest.raises(ValueAlphabetError):
        ternary_planes(np.array([2]))


def test_ternarize_packs_the_threshold_rule(rng):
    w = rng.normal(size=33)
    planes = ternarize(w, 0.7)
    dense = ternarize_values(w, 0.7)
    pos = unpack_bipolar(planes.pos) == 1
    neg = unpack_bipolar(planes.neg) == 1
    assert np.array_equal(pos.astype(np.int8) - neg.astype(np.int8), dense)


def test_sparsity_report_exact_fractions():
    v = np.array([0, 0, 0, 1, 1, -1, 0, 1, -1, 0], dtype=np.int8)
    report = sparsity({"layer-a": ternary_planes(v)})
    (row,) = report.layers
    assert row.zero_fraction == 0.5
    assert row.pos_fraction == 0.3
    assert row.neg_fraction == 0.2
    assert report.mean_zero_fraction == 0.5
    assert "layer-a" in report.to_text()


# --------------------------------------------------------------------------- #
# bundle quantization
# --------------------------------------------------------------------------- #


def test_quantize_bundle_follows_precision_map(rng):
    cfg = tiny_config(precision=PrecisionMap.from_config_id(0x0F0))  # tconvs masked
    bundle = synthesize_bundle(cfg, rng)
    prepared = quantize_bundle(bundle, cfg)
    assert prepared["stem"].kind == "float"
    assert prepared["head"].kind == "float"
    assert prepared["stem2"].kind == "masked"  # always masked regardless of map
    assert prepared["up-CT1"].kind == "masked"
    assert prepared["down-C1.a"].kind == "binary"
    assert prepared["up-C1.b"].kind == "binary"
    assert is_ternary(prepared["up-CT1"].weights)
    assert is_bipolar(prepared["down-C1.a"].weights)
    assert prepared["down-C1.a"].threshold is not None
    assert prepared["stem"].threshold is None
    # the head carries a bias but no batchnorm
    assert prepared["head"].bias is not None and prepared["head"].bn is None


def test_quantize_bundle_is_deterministic(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    a = quantize_bundle(bundle, cfg)
    b = quantize_bundle(bundle, cfg)
    for name in a:
        assert np.array_equal(a[name].weights, b[name].weights)
        if a[name].threshold is not None:
            assert np.array_equal(a[name].threshold.thresholds, b[name].threshold.thresholds)
            assert np.array_equal(a[name].threshold.codes, b[name].threshold.codes)


def test_quantize_bundle_threshold_factor_controls_sparsity(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    loose = quantize_bundle(bundle, cfg, ternary_t=0.0)
    tight = quantize_bundle(bundle, cfg, ternary_t=1.5)
    # t = 0 zeroes (almost) nothing; larger factors zero strictly more
    zeros_loose = (loose["down-C1.a"].weights == 0).mean()
    zeros_tight = (tight["down-C1.a"].weights == 0).mean()
    assert zeros_loose < 0.01 < zeros_tight


def test_quantize_bundle_missing_layer(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    del bundle.entries["down-C2.a"]
    with pytest.raises(BundleError):
        quantize_bundle(bundle, cfg)


def test_quantize_bundle_kind_mismatch(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    bundle.entries["up-CT1"].kind = "conv"
    with pytest.raises(BundleError):
        quantize_bundle(bundle, cfg)


def test_quantize_bundle_shape_mismatch(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    entry = bundle.entries["down-C1.a"]
    entry.weights = entry.weights[:, :, :, :-1]
    with pytest.raises(ShapeError):
        quantize_bundle(bundle, cfg)


def test_quantize_bundle_batchnorm_requirements(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    bundle.entries["down-C3.b"].gamma = None
    with pytest.raises(BundleError):
        quantize_bundle(bundle, cfg)


def test_quantize_bundle_bias_shape(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    bundle.entries["head"].bias = np.zeros(5, dtype=np.float32)
    with pytest.raises(ShapeError):
        quantize_bundle(bundle, cfg)


def test_synthesize_bundle_covers_every_conv(rng):
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    conv_names = {e.name for e in layer_specs(cfg) if e.conv is not None}
    assert set(bundle.entries) == conv_names


# --------------------------------------------------------------------------- #
# bundle disk format
# --------------------------------------------------------------------------- #


def test_save_load_bundle_round_trip(rng, tmp_path):
    cfg = tiny_config(divisor=8)
    bundle = synthesize_bundle(cfg, rng)
    save_bundle(bundle, tmp_path / "b")
    loaded = load_bundle(tmp_path / "b")
    assert set(loaded.entries) == set(bundle.entries)
    for name, entry in bundle.entries.items():
        got = loaded[name]
        assert got.kind == entry.kind
        assert np.array_equal(got.weights, entry.weights)
        for field in ("bias", "gamma", "beta", "mean", "var"):
            a, b = getattr(got, field), getattr(entry, field)
            assert (a is None) == (b is None)
            if a is not None:
                assert np.array_equal(a, b)
        assert (got.eps is None) == (entry.eps is None)
        if got.eps is not None:
            assert got.eps == pytest.approx(entry.eps, rel=1e-6)


def _write_manifest(tmp_path, lines, blob=b""):
    (tmp_path / "manifest").write_text("\n".join(lines) + "\n")
    (tmp_path / "weights.bin").write_bytes(blob)
    return tmp_path


def test_load_bundle_requires_manifest(tmp_path):
    with pytest.raises(BundleError):
        load_bundle(tmp_path)


def test_load_bundle_rejects_bad_magic(tmp_path):
    _write_manifest(tmp_path, ["something-else 1"])
    with pytest.raises(BundleError, match="line 1"):
        load_bundle(tmp_path)


def test_load_bundle_reports_line_numbers(tmp_path):
    blob = np.zeros(4, dtype="<f4").tobytes()
    base = ["bitunet-bundle 1", "layer stem conv 1 2 2 1"]
    cases = [
        (base + ["data weight weights.bin 0 4", "layer x conv 1 1 1 1"], "line 4"),
        (base + ["data weight weights.bin 0 3", "end"], "line 3"),  # wrong count
        (base + ["data bogus weights.bin 0 4", "end"], "line 3"),  # unknown field
        (base + ["data weight weights.bin 8 4", "end"], "line 3"),  # beyond blob
        (base + ["data weight weights.bin 0 4", "data weight weights.bin 0 4", "end"], "line 4"),
        (base + ["data weight weights.bin 0 4", "data gamma weights.bin 0 1", "end"], "line 2"),
        (base + ["end"], "line 2"),  # no weight field
        (base + ["data weight weights.bin 0 4"], "line 2"),  # unterminated
        (["bitunet-bundle 1", "data weight weights.bin 0 4"], "line 2"),  # outside layer
        (["bitunet-bundle 1", "bogus directive"], "line 2"),
        (["bitunet-bundle 1", "layer x sideways 1 1 1 1"], "line 2"),  # bad kind
        (["bitunet-bundle 1", "layer x conv 0 1 1 1"], "line 2"),  # bad dims
    ]
    for lines, needle in cases:
        _write_manifest(tmp_path, lines, blob)
        with pytest.raises(BundleError, match=needle):
            load_bundle(tmp_path)


def test_load_bundle_rejects_duplicate_layers(tmp_path):
    blob = np.zeros(8, dtype="<f4").tobytes()
    lines = [
        "bitunet-bundle 1",
        "layer stem conv 1 2 2 1",
        "data weight weights.bin 0 4",
        "end",
        "layer stem conv 1 2 2 1",
        "data weight weights.bin 16 4",
        "end",
    ]
    _write_manifest(tmp_path, lines, blob)
    with pytest.raises(BundleError, match="line 5"):
        load_bundle(tmp_path)


def test_load_bundle_rejects_missing_blob(tmp_path):
    (tmp_path / "manifest").write_text(
        "bitunet-bundle 1\nlayer stem conv 1 1 1 1\ndata weight nope.bin 0 1\nend\n"
    )
    with pytest.raises(BundleError, match="nope.bin"):
        load_bundle(tmp_path)


def test_load_bundle_rejects_negative_variance(tmp_path):
    values = np.array([1.0, 1.0, 1.0, 1.0, -2.0], dtype="<f4")
    lines = [
        "bitunet-bundle 1",
        "layer stem conv 1 1 1 1",
        "data weight weights.bin 0 1",
        "data gamma weights.bin 4 1",
        "data beta weights.bin 8 1",
        "data mean weights.bin 12 1",
        "data var weights.bin 16 1",
        "end",
    ]
    _write_manifest(tmp_path, lines, values.tobytes())
    with pytest.raises(BundleError, match="variance"):
        load_bundle(tmp_path)


def test_load_bundle_allows_comments_and_blank_lines(tmp_path):
    values = np.arange(4, dtype="<f4")
    lines = [
        "bitunet-bundle 1",
        "",
        "# a comment",
        "layer stem conv 1 2 2 1  # trailing comment",
        "data weight weights.bin 0 4",
        "end",
    ]
    _write_manifest(tmp_path, lines, values.tobytes())
    bundle = load_bundle(tmp_path)
    assert np.array_equal(bundle["stem"].weights.reshape(-1), values)
