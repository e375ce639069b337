"""Cost model, layer scoring, sweep enumeration, and marginal analysis."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitunet.errors import FormatError, ShapeError, UnsupportedConfigError
from bitunet.graph import CONFIGURABLE_LABELS, UNetConfig, layer_specs
from bitunet.planner import (
    MarginalReport,
    ResultsTable,
    cost_scores,
    count_ops,
    count_params,
    enumerate_configs,
    marginal_contribution,
    parse_results_csv,
    profile_table,
    select_mask_plan,
    total_ops,
    total_params,
)
from bitunet.quantizer import synthesize_bundle

from conftest import tiny_config

# --------------------------------------------------------------------------- #
# independent cost oracle, written from the architecture definition alone
# --------------------------------------------------------------------------- #


def oracle_costs(extent: int) -> tuple[dict, dict]:
    """ops/params per configurable label, recomputed from first principles."""
    e = (64, 128, 256, 512, 512)  # stem + encoder stages
    t = (384, 192, 96, 48)
    u = (256, 128, 64, 64)
    ops: dict[str, int] = {}
    params: dict[str, int] = {}
    for i in range(1, 5):  # encoder stage i works at extent / 2^i
        px = (extent >> i) ** 2
        ops[f"down-C{i}"] = 2 * px * e[i] * (e[i - 1] * 9) + 2 * px * e[i] * (e[i] * 9)
        params[f"down-C{i}"] = 9 * e[i] * (e[i - 1] + e[i]) + 4 * e[i]
    src = e[4]
    for i in range(1, 5):  # decoder stage i emits extent / 2^(4-i)
        px_out = (extent >> (4 - i)) ** 2
        ops[f"up-CT{i}"] = 2 * px_out * t[i - 1] * src  # one tap per output pixel
        params[f"up-CT{i}"] = 4 * t[i - 1] * src + 2 * t[i - 1]
        cat = t[i - 1] + e[4 - i]
        ops[f"up-C{i}"] = 2 * px_out * u[i - 1] * (cat * 9) + 2 * px_out * u[i - 1] * (u[i - 1] * 9)
        params[f"up-C{i}"] = 9 * u[i - 1] * (cat + u[i - 1]) + 4 * u[i - 1]
        src = u[i - 1]
    return ops, params


def test_count_ops_matches_independent_oracle():
    cfg = UNetConfig()
    ops, params = oracle_costs(512)
    for label in CONFIGURABLE_LABELS:
        assert count_ops(cfg, label) == ops[label], label
        assert count_params(cfg, label) == params[label], label


def test_count_ops_hand_checked_values():
    cfg = UNetConfig()
    # spot values computed by hand from the channel schedule
    assert count_ops(cfg, "down-C1") == 28_991_029_248
    assert count_ops(cfg, "up-C4") == 53_150_220_288
    # all four transposed convs cost the same: channels halve as pixels quadruple
    assert {count_ops(cfg, f"up-CT{i}") for i in (1, 2, 3, 4)} == {1_610_612_736}


def test_total_params_is_in_published_range():
    assert total_params(UNetConfig()) == 14_041_057


def test_params_match_synthesized_bundle(rng):
    # independent route: actual array sizes of a synthesized float bundle
    cfg = tiny_config()
    bundle = synthesize_bundle(cfg, rng)
    for label in CONFIGURABLE_LABELS + ("stem", "stem2", "head"):
        expected = 0
        for entry in layer_specs(cfg):
            if entry.label != label or entry.conv is None:
                continue
            be = bundle[entry.name]
            expected += be.weights.size
            if be.gamma is not None:
                expected += 2 * be.gamma.size  # folded scale + shift
            if be.bias is not None:
                expected += be.bias.size
        assert count_params(cfg, label) == expected, label


def test_profile_table_covers_all_labels_and_sums():
    cfg = UNetConfig()
    table = profile_table(cfg)
    assert [row[0] for row in table] == list(("stem", "stem2") + CONFIGURABLE_LABELS + ("head",))
    assert sum(row[1] for row in table) == total_ops(cfg)
    assert sum(row[2] for row in table) == total_params(cfg)


def test_count_ops_validation():
    cfg = UNetConfig()
    with pytest.raises(UnsupportedConfigError):
        count_ops(cfg, "sideways-C9")
    with pytest.raises(ShapeError):
        count_ops(cfg, "down-C1", extent=(100, 100))


# --------------------------------------------------------------------------- #
# scoring
# --------------------------------------------------------------------------- #


def test_cost_scores_normalization_and_ranks():
    report = cost_scores(UNetConfig(), w_op=0.5)
    ops, params = oracle_costs(512)
    top_ops = max(ops.values())
    top_params = max(params.values())
    for cost in report.entries:
        assert cost.n_op == ops[cost.label]
        assert cost.score == pytest.approx(
            0.5 * ops[cost.label] / top_ops + 0.5 * params[cost.label] / top_params
        )
    scores = [c.score for c in report.entries]
    assert scores == sorted(scores)
    assert report.rank_of(report.entries[0].label) == 1
    assert report["up-CT4"].label == "up-CT4"


def test_cost_scores_cheapest_four_are_the_transposed_convs():
    report = cost_scores(UNetConfig(), w_op=0.5)
    assert [c.label for c in report.entries[:4]] == ["up-CT4", "up-CT3", "up-CT2", "up-CT1"]


def test_cost_scores_scale_invariant():
    # ops scale uniformly with extent, so normalized scores do not move
    a = cost_scores(UNetConfig(), extent=(512, 512))
    b = cost_scores(UNetConfig(), extent=(256, 256))
    assert [c.label for c in a.entries] == [c.label for c in b.entries]
    for x, y in zip(a.entries, b.entries):
        assert x.score == y.score


def test_cost_scores_tie_break_is_label_order():
    # uniform channels + w_op=0 leaves three groups of exactly tied scores;
    # ties must resolve by configurable-label declaration order
    cfg = UNetConfig(
        stem_channels=64,
        encoder_channels=(64, 64, 64, 64),
        tconv_channels=(64, 64, 64, 64),
        decoder_channels=(64, 64, 64, 64),
    )
    report = cost_scores(cfg, w_op=0.0)
    labels = [c.label for c in report.entries]
    assert labels == [
        "up-CT1", "up-CT2", "up-CT3", "up-CT4",
        "down-C1", "down-C2", "down-C3", "down-C4",
        "up-C1", "up-C2", "up-C3", "up-C4",
    ]


def test_cost_scores_w_op_extremes():
    pure_ops = cost_scores(UNetConfig(), w_op=1.0)
    for cost in pure_ops.entries:
        assert cost.score == pytest.approx(cost.n_op_norm)
    with pytest.raises(UnsupportedConfigError):
        cost_scores(UNetConfig(), w_op=1.5)
    with pytest.raises(UnsupportedConfigError):
        cost_scores(UNetConfig(), normalization="bogus")


def test_cost_report_text_and_csv():
    report = cost_scores(UNetConfig())
    text = report.to_text()
    csv = report.to_csv()
    for label in CONFIGURABLE_LABELS:
        assert label in text and label in csv
    assert csv.splitlines()[0].startswith("label,rank,")


def test_select_mask_plan_nesting():
    report = cost_scores(UNetConfig())
    previous = frozenset()
    for k in range(13):
        plan = select_mask_plan(report, k)
        assert plan.masked_count() == k
        assert previous <= plan.masked_labels
        previous = plan.masked_labels
    assert select_mask_plan(report, 4).masked_labels == {
        "up-CT1", "up-CT2", "up-CT3", "up-CT4"
    }
    assert select_mask_plan(report, 4).config_id() == 0x0F0
    with pytest.raises(UnsupportedConfigError):
        select_mask_plan(report, 13)
    with pytest.raises(UnsupportedConfigError):
        select_mask_plan(report, -1)


# --------------------------------------------------------------------------- #
# sweep enumeration
# --------------------------------------------------------------------------- #


def test_enumerate_configs_unbounded_is_the_full_space():
    ids = list(enumerate_configs())
    assert ids == list(range(4096))


@pytest.mark.parametrize("max_masked", [0, 1, 4, 12])
def test_enumerate_configs_binomial_count(max_masked):
    ids = list(enumerate_configs(max_masked=max_masked))
    assert len(ids) == sum(math.comb(12, i) for i in range(max_masked + 1))
    assert all(i.bit_count() <= max_masked for i in ids)
    assert ids == sorted(ids)


def test_enumerate_configs_predicate():
    ids = list(enumerate_configs(max_masked=2, predicate=lambda i: i % 2 == 0))
    assert all(i % 2 == 0 and i.bit_count() <= 2 for i in ids)
    assert 0 in ids and 1 not in ids


# --------------------------------------------------------------------------- #
# results tables
# --------------------------------------------------------------------------- #


def test_results_table_lookup():
    table = ResultsTable(((0, 0.5), (7, 0.75)))
    assert len(table) == 2
    assert 7 in table and 1 not in table
    assert table.score(7) == 0.75
    with pytest.raises(FormatError):
        ResultsTable(((0, 0.5), (0, 0.6)))
    with pytest.raises(FormatError):
        ResultsTable(((4096, 0.5),))


def test_parse_results_csv_round_trip(tmp_path):
    path = tmp_path / "results.csv"
    path.write_text("config_id,dice\n0,0.5\n240,0.8125\n\n15,0.25\n")
    table = parse_results_csv(path)
    assert len(table) == 3
    assert table.score(240) == 0.8125


@pytest.mark.parametrize(
    "content,line",
    [
        ("dice,config_id\n0,0.5\n", ":1"),
        ("config_id,dice\n0,0.5,9\n", ":3"),
        ("config_id,dice\nx,0.5\n", ":2"),
        ("config_id,dice\n0,monkey\n", ":2"),
        ("config_id,dice\n5000,0.5\n", ":2"),
        ("config_id,dice\n0,1.5\n", ":2"),
        ("config_id,dice\n3,0.5\n3,0.5\n", ":3"),
    ],
    ids=["header", "fields", "bad-id", "bad-dice", "id-range", "dice-range", "dup"],
)
def test_parse_results_csv_errors_carry_line_numbers(tmp_path, content, line):
    path = tmp_path / "results.csv"
    # put the failing row after a valid one where the case allows
    if line == ":3" and "0,0.5,9" in content:
        content = "config_id,dice\n1,0.5\n0,0.5,9\n"
    path.write_text(content)
    with pytest.raises(FormatError, match=line):
        parse_results_csv(path)


# --------------------------------------------------------------------------- #
# marginal contributions
# --------------------------------------------------------------------------- #

# per-layer planted gains, exactly representable in binary
PLANTED = {label: (i - 5) / 64.0 for i, label in enumerate(CONFIGURABLE_LABELS)}


def planted_table(max_masked: int = 4) -> ResultsTable:
    rows = []
    for config_id in enumerate_configs(max_masked=max_masked):
        dice = 0.5 + sum(
            PLANTED[label]
            for i, label in enumerate(CONFIGURABLE_LABELS)
            if config_id >> i & 1
        )
        rows.append((config_id, dice))
    return ResultsTable(tuple(rows))


def test_marginal_contribution_recovers_planted_gains():
    report = marginal_contribution(planted_table(), max_masked=5)
    for label in CONFIGURABLE_LABELS:
        assert report.gains[label] == pytest.approx(PLANTED[label], abs=1e-12)
        # sets of size 0..3 qualify: the flipped set must stay under 5 masked
        assert report.pairs_used[label] == sum(math.comb(11, k) for k in range(4))
        assert report.pairs_skipped[label] == 0


def test_marginal_contribution_counts_missing_partners():
    table = planted_table()
    rows = [r for r in table.rows if r[0] != 1]  # drop config {down-C1}
    report = marginal_contribution(ResultsTable(tuple(rows)), max_masked=5)
    assert report.pairs_skipped["down-C1"] == 1
    assert report.pairs_used["down-C1"] == sum(math.comb(11, k) for k in range(4)) - 1
    # remaining pairs still average to the planted gain exactly
    assert report.gains["down-C1"] == pytest.approx(PLANTED["down-C1"], abs=1e-12)


def test_marginal_contribution_constant_table_gives_zero():
    rows = tuple((i, 0.5) for i in enumerate_configs(max_masked=2))
    report = marginal_contribution(ResultsTable(rows), max_masked=3)
    for label in CONFIGURABLE_LABELS:
        assert report.gains[label] == 0.0


def test_marginal_contribution_without_pairs_is_undefined():
    report = marginal_contribution(ResultsTable(((0, 0.5),)), max_masked=5)
    for label in CONFIGURABLE_LABELS:
        assert report.gains[label] is None
        assert report.pairs_used[label] == 0
        assert report.pairs_skipped[label] == 1
    assert "undefined" in report.to_text()
    assert report.to_csv().splitlines()[1].split(",")[1] == ""


def test_marginal_contribution_respects_max_masked():
    # the flipped config must stay strictly under max_masked, so with 2 only
    # the empty base set qualifies, and with 1 nothing does
    report = marginal_contribution(planted_table(), max_masked=2)
    for label in CONFIGURABLE_LABELS:
        assert report.pairs_used[label] == 1
        assert report.gains[label] == pytest.approx(PLANTED[label], abs=1e-12)
    none = marginal_contribution(planted_table(), max_masked=1)
    assert all(none.gains[label] is None for label in CONFIGURABLE_LABELS)
    with pytest.raises(UnsupportedConfigError):
        marginal_contribution(planted_table(), max_masked=0)
