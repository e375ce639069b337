"""Cost-aware masking planner.

Per-layer operation/parameter accounting, weighted cost scoring, ranking,
mask-plan selection, config-sweep enumeration, and marginal-contribution
analysis over externally supplied accuracy tables.

Cost model
----------
* A convolution costs ``2 * H_out * W_out * C_out * (C_in * K_h * K_w)``:
  one multiply plus one add per accumulated tap.
* A stride-2 transposed convolution with a 2x2 kernel scatters exactly one
  tap onto each output pixel, so it costs ``2 * H_out * W_out * C_out * C_in``.
* Batchnorm, thresholding, pooling, and concatenation arithmetic is excluded:
  it is linear in pixel count and dominated by the MAC terms above.
* Parameter counts are ``C_out * C_in * K_h * K_w`` weights plus two
  batchnorm scalars per output channel where a batchnorm follows, plus one
  bias scalar per output channel where a bias exists.

A configurable label owns all conv steps carrying it (each double-conv label
covers both of its 3x3 convs); scores normalize op and param counts by the
maximum over the 12 configurable layers and rank ascending.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, ShapeError, UnsupportedConfigError
from .graph import (
    ALL_LABELS,
    CONFIGURABLE_LABELS,
    PrecisionMap,
    UNetConfig,
    layer_specs,
)

__all__ = [
    "LayerCost",
    "CostReport",
    "ResultsTable",
    "MarginalReport",
    "count_ops",
    "count_params",
    "total_params",
    "total_ops",
    "profile_table",
    "cost_scores",
    "select_mask_plan",
    "enumerate_configs",
    "marginal_contribution",
    "parse_results_csv",
]


# --------------------------------------------------------------------------- #
# op / param accounting
# --------------------------------------------------------------------------- #


def _check_extent(extent) -> tuple:
    h, w = int(extent[0]), int(extent[1])
    if h <= 0 or w <= 0 or h % 16 or w % 16:
        raise ShapeError(f"extent {h}x{w} must be positive and divisible by 16")
    return h, w


def _label_entries(config: UNetConfig, label: str) -> tuple:
    entries = tuple(e for e in layer_specs(config) if e.label == label)
    if not entries:
        raise UnsupportedConfigError(f"unknown layer label {label!r}")
    return entries


def _entry_ops(entry, height: int, width: int) -> int:
    if entry.conv is None:
        return 0
    spec = entry.conv
    h, w = height // entry.scale, width // entry.scale
    if entry.kind == "bit-tconv":
        h_out, w_out = h * spec.stride, w * spec.stride
        taps = spec.c_in  # one kernel tap lands on each output pixel
    else:
        h_out, w_out = spec.out_extent(h, w)
        taps = spec.c_in * spec.kernel_h * spec.kernel_w
    return 2 * h_out * w_out * spec.c_out * taps


def _entry_params(entry) -> int:
    if entry.conv is None:
        return 0
    spec = entry.conv
    n = spec.c_out * spec.c_in * spec.kernel_h * spec.kernel_w
    if entry.has_bn:
        n += 2 * spec.c_out
    if entry.has_bias:
        n += spec.c_out
    return n


def count_ops(config: UNetConfig, label: str, extent=None) -> int:
    """Multiply+add count for every conv step owned by ``label``.

    ``extent`` is the model input extent; defaults to the config's own.
    """
    h, w = _check_extent(extent if extent is not None else (config.height, config.width))
    return sum(_entry_ops(e, h, w) for e in _label_entries(config, label))


def count_params(config: UNetConfig, label: str) -> int:
    """Weight + batchnorm + bias scalar count for ``label``."""
    return sum(_entry_params(e) for e in _label_entries(config, label))


def total_ops(config: UNetConfig, extent=None) -> int:
    return sum(count_ops(config, label, extent) for label in ALL_LABELS)


def total_params(config: UNetConfig) -> int:
    return sum(count_params(config, label) for label in ALL_LABELS)


def profile_table(config: UNetConfig, extent=None) -> list:
    """(label, ops, params) rows over all labels, in execution order."""
    return [
        (label, count_ops(config, label, extent), count_params(config, label))
        for label in ALL_LABELS
    ]


# --------------------------------------------------------------------------- #
# scoring
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LayerCost:
    """Cost record for one configurable layer under given score weights."""

    label: str
    n_op: int
    n_param: int
    n_op_norm: float
    n_param_norm: float
    score: float


@dataclass(frozen=True)
class CostReport:
    """Configurable-layer costs sorted by ascending score.

    Ties break by the fixed label order (down-C1..4, up-CT1..4, up-C1..4),
    so the ordering is total and deterministic. ``entries[0]`` is rank 1.
    """

    entries: tuple
    w_op: float
    w_param: float
    extent: tuple

    def rank_of(self, label: str) -> int:
        for i, cost in enumerate(self.entries):
            if cost.label == label:
                return i + 1
        raise UnsupportedConfigError(f"unknown layer label {label!r}")

    def __getitem__(self, label: str) -> LayerCost:
        return self.entries[self.rank_of(label) - 1]

    def to_text(self) -> str:
        lines = [
            f"cost ranking at {self.extent[0]}x{self.extent[1]}"
            f" (w_op={self.w_op:g}, w_param={self.w_param:g})",
            f"{'rank':>4}  {'layer':<8} {'ops':>14} {'params':>10}"
            f" {'op-norm':>8} {'par-norm':>8} {'score':>7}",
        ]
        for i, c in enumerate(self.entries):
            lines.append(
                f"{i + 1:>4}  {c.label:<8} {c.n_op:>14} {c.n_param:>10}"
                f" {c.n_op_norm:>8.4f} {c.n_param_norm:>8.4f} {c.score:>7.4f}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["label,rank,n_op,n_param,n_op_norm,n_param_norm,score"]
        for i, c in enumerate(self.entries):
            lines.append(
                f"{c.label},{i + 1},{c.n_op},{c.n_param},"
                f"{c.n_op_norm!r},{c.n_param_norm!r},{c.score!r}"
            )
        return "\n".join(lines)


def _normalize(values, scheme: str) -> list:
    top = max(values)
    if scheme == "max":
        return [v / top if top else 0.0 for v in values]
    if scheme == "minmax":
        low = min(values)
        span = top - low
        return [(v - low) / span if span else 0.0 for v in values]
    raise UnsupportedConfigError(f"unknown normalization {scheme!r}")


def cost_scores(
    config: UNetConfig, w_op: float = 0.5, extent=None, normalization: str = "max"
) -> CostReport:
    """Score the 12 configurable layers: ``w_op*op_norm + (1-w_op)*param_norm``.

    Counts normalize by the maximum across the configurable layers (the
    ``minmax`` scheme is kept only for comparison studies); ranking is
    ascending with stable tie-break by label order.
    """
    if not 0.0 <= w_op <= 1.0:
        raise UnsupportedConfigError(f"w_op must lie in [0, 1], got {w_op}")
    w_param = 1.0 - w_op
    h, w = _check_extent(extent if extent is not None else (config.height, config.width))
    ops = [count_ops(config, label, (h, w)) for label in CONFIGURABLE_LABELS]
    params = [count_params(config, label) for label in CONFIGURABLE_LABELS]
    op_norm = _normalize(ops, normalization)
    par_norm = _normalize(params, normalization)
    costs = [
        LayerCost(label, ops[i], params[i], op_norm[i], par_norm[i],
                  w_op * op_norm[i] + w_param * par_norm[i])
        for i, label in enumerate(CONFIGURABLE_LABELS)
    ]
    order = sorted(range(len(costs)), key=lambda i: (costs[i].score, i))
    return CostReport(tuple(costs[i] for i in order), w_op, w_param, (h, w))


def select_mask_plan(report: CostReport, k: int) -> PrecisionMap:
    """Mask the ``k`` cheapest layers (ranks 1..k); the rest stay Binary."""
    if not 0 <= k <= len(report.entries):
        raise UnsupportedConfigError(
            f"k must lie in [0, {len(report.entries)}], got {k}"
        )
    return PrecisionMap(frozenset(c.label for c in report.entries[:k]))


# --------------------------------------------------------------------------- #
# sweep enumeration and marginal contributions
# --------------------------------------------------------------------------- #


def enumerate_configs(max_masked: int | None = None, predicate=None):
    """Yield qualifying 12-bit ConfigIds once each, ascending.

    ``max_masked`` is inclusive (``max_masked=4`` keeps ids with fewer than
    five masked layers); ``predicate`` receives the integer id.
    """
    for config_id in range(4096):
        if max_masked is not None and config_id.bit_count() > max_masked:
            continue
        if predicate is not None and not predicate(config_id):
            continue
        yield config_id


@dataclass(frozen=True)
class ResultsTable:
    """Accuracy rows (ConfigId, Dice) supplied by an external sweep."""

    rows: tuple
    lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple((int(c), float(s)) for c, s in self.rows))
        lookup = {}
        for config_id, dice in self.rows:
            if not 0 <= config_id < 4096:
                raise FormatError(f"config id {config_id} outside [0, 4095]")
            if not 0.0 <= dice <= 1.0:
                raise FormatError(f"dice {dice} for id {config_id} outside [0, 1]")
            if config_id in lookup:
                raise FormatError(f"duplicate config id {config_id}")
            lookup[config_id] = dice
        object.__setattr__(self, "lookup", lookup)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, config_id: int) -> bool:
        return config_id in self.lookup

    def score(self, config_id: int) -> float:
        return self.lookup[config_id]


def parse_results_csv(path) -> ResultsTable:
    """Read a ``config_id,dice`` table; errors carry 1-based line numbers."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "config_id,dice":
        raise FormatError("missing 'config_id,dice' header", where=f"{path}:1")
    rows = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise FormatError(
                f"expected 2 comma-separated fields, got {len(parts)}",
                where=f"{path}:{lineno}",
            )
        try:
            config_id = int(parts[0], 10)
            dice = float(parts[1])
        except ValueError as exc:
            raise FormatError(str(exc), where=f"{path}:{lineno}") from exc
        if not 0 <= config_id < 4096:
            raise FormatError(f"config id {config_id} outside [0, 4095]",
                              where=f"{path}:{lineno}")
        if not 0.0 <= dice <= 1.0:
            raise FormatError(f"dice {dice} outside [0, 1]", where=f"{path}:{lineno}")
        if config_id in seen:
            raise FormatError(f"duplicate config id {config_id}",
                              where=f"{path}:{lineno}")
        seen.add(config_id)
        rows.append((config_id, dice))
    return ResultsTable(tuple(rows))


@dataclass(frozen=True)
class MarginalReport:
    """Mean per-layer Dice gain from flipping that one layer to Masked.

    ``gains[label]`` is None when the table holds no usable pair for the
    layer (undefined, deliberately distinct from a measured 0.0);
    ``pairs_used``/``pairs_skipped`` count complete and half-missing pairs.
    """

    gains: dict
    pairs_used: dict
    pairs_skipped: dict
    max_masked: int

    def to_text(self) -> str:
        lines = [
            f"marginal dice gain per layer (pairs restricted to < {self.max_masked}"
            " masked layers)",
            f"{'layer':<8} {'mean gain':>12} {'pairs':>6} {'skipped':>8}",
        ]
        for label in CONFIGURABLE_LABELS:
            gain = self.gains[label]
            shown = "undefined" if gain is None else f"{gain:+.6f}"
            lines.append(
                f"{label:<8} {shown:>12} {self.pairs_used[label]:>6}"
                f" {self.pairs_skipped[label]:>8}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["label,mean_gain,pairs_used,pairs_skipped"]
        for label in CONFIGURABLE_LABELS:
            gain = self.gains[label]
            shown = "" if gain is None else repr(gain)
            lines.append(
                f"{label},{shown},{self.pairs_used[label]},{self.pairs_skipped[label]}"
            )
        return "\n".join(lines)


def marginal_contribution(results: ResultsTable, max_masked: int = 5) -> MarginalReport:
    """Average ``dice(S + layer) - dice(S)`` over all pairs in the table.

    Pairs qualify when the layer is Binary in S and the flipped config has
    fewer than ``max_masked`` masked layers; rows whose partner is absent
    are skipped and counted, and a layer with no complete pair reports None.
    """
    if max_masked < 1:
        raise UnsupportedConfigError(f"max_masked must be >= 1, got {max_masked}")
    gains, used, skipped = {}, {}, {}
    for i, label in enumerate(CONFIGURABLE_LABELS):
        bit = 1 << i
        deltas = []
        missing = 0
        for config_id, dice in results.rows:
            if config_id & bit or (config_id | bit).bit_count() >= max_masked:
                continue
            partner = config_id | bit
            if partner in results:
                deltas.append(results.score(partner) - dice)
            else:
                missing += 1
        gains[label] = statistics.fmean(deltas) if deltas else None
        used[label] = len(deltas)
        skipped[label] = missing
    return MarginalReport(gains, used, skipped, max_masked)
