"""Throughput benchmarks: packed bit path vs naive float path vs oracle.

The micro benchmark times one masked 3x3 convolution (default 256->256
channels at 64x64) on three implementations of the same arithmetic:

* bit path — packed XOR/popcount GEMM (the production kernel),
* naive float reference — direct sliding-window float64 convolution, one
  GEMV per output pixel, no lowering or offset fusion,
* integer oracle — the exact reference from :mod:`bitunet.oracle`.

The model benchmark replays a full compiled network both ways. All timed
paths compute identical values (checked before timing); numbers are medians
of ``reps`` runs after an untimed warm-up for the JIT path.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace

import numpy as np

from . import oracle
from .bitcore import pack_tensor
from .errors import EngineError, ShapeError
from .graph import CompiledModel, forward, input_segments
from .layers import (
    CONST_POS,
    DIR_GE,
    DIR_LE,
    ConvSpec,
    conv_forward,
    pack_conv_weights,
    unpack_conv_weights,
)
from .planner import total_ops

__all__ = [
    "naive_float_conv",
    "dense_float_forward",
    "MicroBench",
    "ModelBench",
    "micro_bench",
    "model_bench",
]


def naive_float_conv(x, w, stride: int = 1, padding: int = 0, pad_value: float = -1.0):
    """Direct sliding-window float64 convolution (the timing baseline).

    Walks output pixels one by one and takes a full receptive-field dot
    product per pixel; deliberately free of lowering tricks.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, h, ww, ci = x.shape
    co, kh, kw, ci2 = w.shape
    if ci != ci2:
        raise ShapeError(f"input channels {ci} != weight channels {ci2}")
    p, s = padding, stride
    padded = np.full((n, h + 2 * p, ww + 2 * p, ci), float(pad_value), dtype=np.float64)
    padded[:, p : p + h, p : p + ww, :] = x
    h_out = (h + 2 * p - kh) // s + 1
    w_out = (ww + 2 * p - kw) // s + 1
    wmat = w.reshape(co, kh * kw * ci)
    out = np.empty((n, h_out, w_out, co), dtype=np.float64)
    for b in range(n):
        for i in range(h_out):
            for j in range(w_out):
                patch = padded[b, i * s : i * s + kh, j * s : j * s + kw, :]
                out[b, i, j] = wmat @ patch.reshape(-1)
    return out


def _naive_float_tconv(x, w):
    """Stride-2 kernel-2 transposed conv, one source tap per output pixel."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, h, ww, ci = x.shape
    co = w.shape[0]
    out = np.empty((n, h * 2, ww * 2, co), dtype=np.float64)
    for dy in range(2):
        for dx in range(2):
            out[:, dy::2, dx::2, :] = x @ w[:, dy, dx, :].T
    return out


def _apply_threshold_dense(acc, threshold):
    """FusedThreshold semantics on a dense accumulator; returns ±1 floats."""
    t = threshold.thresholds.astype(np.float64)
    codes = threshold.codes
    fired = np.where(codes == DIR_GE, acc >= t, np.where(codes == DIR_LE, acc <= t, codes == CONST_POS))
    return np.where(fired, 1.0, -1.0)


def dense_float_forward(model: CompiledModel, image):
    """Replay a compiled model densely in float64 with naive convolutions.

    Bit-layer weights are recovered from their packed planes; returns
    (logits, mask) shaped like :func:`bitunet.graph.forward`'s result.
    """
    cfg = model.config
    segments_in = input_segments(cfg)
    pad_value = float(cfg.pad_value)
    outputs = {}
    x = np.asarray(image, dtype=np.float64)
    logits = None
    for layer in model.layers:
        if layer.kind == "float-conv":
            s = layer.spec
            acc = naive_float_conv(x, layer.weights, s.stride, s.padding, 0.0)
            if layer.bias is not None:
                acc = acc + np.asarray(layer.bias, dtype=np.float64)
            if layer.apply_sign:
                gamma, beta, mean, var, eps = layer.bn
                gamma = np.asarray(gamma, dtype=np.float64)
                sigma = np.sqrt(np.asarray(var, dtype=np.float64) + eps)
                pred = gamma * (acc - np.asarray(mean, dtype=np.float64)) / sigma
                x = np.where(pred + np.asarray(beta, dtype=np.float64) >= 0.0, 1.0, -1.0)
            else:
                logits = acc
                x = acc
        elif layer.kind in ("binary-conv", "masked-conv"):
            s = layer.spec
            w = unpack_conv_weights(layer.weights, s, segments_in[layer.name])
            acc = naive_float_conv(x, w, s.stride, s.padding, pad_value)
            x = _apply_threshold_dense(acc, layer.threshold)
        elif layer.kind in ("binary-tconv", "masked-tconv"):
            w = unpack_conv_weights(layer.weights, layer.spec, segments_in[layer.name])
            acc = _naive_float_tconv(x, w)
            x = _apply_threshold_dense(acc, layer.threshold)
        elif layer.kind == "maxpool":
            n, h, w_, c = x.shape
            x = x.reshape(n, h // 2, 2, w_ // 2, 2, c).max(axis=(2, 4))
        elif layer.kind == "concat":
            x = np.concatenate([x, outputs[layer.concat_with]], axis=3)
        outputs[layer.name] = x
    return logits, (logits >= 0.0).astype(np.uint8)


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# --------------------------------------------------------------------------- #
# micro benchmark
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class MicroBench:
    """One-conv timing comparison; times are seconds per pass."""

    channels: int
    extent: int
    kernel: int
    reps: int
    threads: int
    n_ops: int
    t_bit: float
    t_naive: float
    t_oracle: float | None

    @property
    def speedup_naive(self) -> float:
        return self.t_naive / self.t_bit

    @property
    def speedup_oracle(self) -> float | None:
        return None if self.t_oracle is None else self.t_oracle / self.t_bit

    def _rows(self):
        rows = [
            ("bit-path", self.t_bit, 1.0),
            ("naive-float", self.t_naive, self.speedup_naive),
        ]
        if self.t_oracle is not None:
            rows.append(("integer-oracle", self.t_oracle, self.speedup_oracle))
        return rows

    def to_text(self) -> str:
        head = (
            f"masked conv {self.channels}->{self.channels}, "
            f"{self.extent}x{self.extent}, {self.kernel}x{self.kernel}, "
            f"{self.n_ops} ops, {self.threads} thread(s), median of {self.reps}"
        )
        lines = [head, f"{'path':<15} {'seconds':>12} {'Gops/s':>10} {'vs bit':>8}"]
        for name, t, ratio in self._rows():
            lines.append(
                f"{name:<15} {t:>12.6f} {self.n_ops / t / 1e9:>10.3f} {ratio:>7.1f}x"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["path,seconds,gops_per_s,ratio_vs_bit"]
        for name, t, ratio in self._rows():
            lines.append(f"{name},{t!r},{self.n_ops / t / 1e9!r},{ratio!r}")
        return "\n".join(lines)


def micro_bench(
    channels: int = 256,
    extent: int = 64,
    kernel: int = 3,
    reps: int = 5,
    threads: int = 1,
    seed: int = 0,
    include_oracle: bool = True,
) -> MicroBench:
    """Time the three paths on one randomized masked convolution.

    All three are checked to produce identical accumulators before timing.
    """
    rng = np.random.default_rng(seed)
    acts = (rng.integers(0, 2, (1, extent, extent, channels)) * 2 - 1).astype(np.int8)
    wvals = rng.integers(-1, 2, (channels, kernel, kernel, channels)).astype(np.int8)
    pad = kernel // 2
    spec = ConvSpec(kernel, kernel, 1, pad, channels, channels)
    x = pack_tensor(acts)
    planes = pack_conv_weights(wvals, x.segments, masked=True)

    got = conv_forward(x, planes, spec, threads=threads)  # doubles as JIT warm-up
    naive = naive_float_conv(acts, wvals, 1, pad, -1.0)
    if not np.array_equal(got.astype(np.int64), naive.astype(np.int64)):
        raise EngineError("bit path disagrees with the float reference; not timing")

    t_bit = _median_time(lambda: conv_forward(x, planes, spec, threads=threads), reps)
    t_naive = _median_time(lambda: naive_float_conv(acts, wvals, 1, pad, -1.0), 1)
    t_oracle = None
    if include_oracle:
        ref = oracle.ref_conv(acts, wvals, 1, pad, -1)
        if not np.array_equal(got.astype(np.int64), ref):
            raise EngineError("bit path disagrees with the oracle; not timing")
        t_oracle = _median_time(lambda: oracle.ref_conv(acts, wvals, 1, pad, -1), 1)
    h_out = extent  # stride 1, same padding
    n_ops = 2 * h_out * h_out * channels * (channels * kernel * kernel)
    return MicroBench(channels, extent, kernel, reps, threads, n_ops, t_bit, t_naive, t_oracle)


# --------------------------------------------------------------------------- #
# model benchmark
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ModelBench:
    """Whole-network timing; ``mask_agreement`` is the fraction of mask
    pixels on which the two paths agree (1.0 expected; the float stem may
    theoretically flip ties)."""

    extent: tuple
    reps: int
    threads: int
    n_ops: int
    t_bit: float
    t_float: float | None
    mask_agreement: float | None

    @property
    def speedup_float(self) -> float | None:
        return None if self.t_float is None else self.t_float / self.t_bit

    def to_text(self) -> str:
        h, w = self.extent
        lines = [
            f"full forward at {h}x{w}, {self.n_ops} ops, {self.threads} thread(s),"
            f" median of {self.reps}",
            f"{'path':<15} {'seconds':>12} {'Gops/s':>10} {'Mpx/s':>8}",
            f"{'bit-path':<15} {self.t_bit:>12.6f} {self.n_ops / self.t_bit / 1e9:>10.3f}"
            f" {h * w / self.t_bit / 1e6:>8.3f}",
        ]
        if self.t_float is not None:
            lines.append(
                f"{'naive-float':<15} {self.t_float:>12.6f}"
                f" {self.n_ops / self.t_float / 1e9:>10.3f}"
                f" {h * w / self.t_float / 1e6:>8.3f}"
            )
            lines.append(
                f"bit path is {self.speedup_float:.1f}x the naive float path;"
                f" mask agreement {self.mask_agreement:.6f}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["path,seconds,gops_per_s"]
        lines.append(f"bit-path,{self.t_bit!r},{self.n_ops / self.t_bit / 1e9!r}")
        if self.t_float is not None:
            lines.append(
                f"naive-float,{self.t_float!r},{self.n_ops / self.t_float / 1e9!r}"
            )
        return "\n".join(lines)


def model_bench(
    model: CompiledModel,
    extent=None,
    reps: int = 3,
    threads: int = 1,
    seed: int = 0,
    include_float: bool = True,
) -> ModelBench:
    """Time full forward passes, optionally against the dense float replay.

    ``extent`` reshapes the benchmark input (the compiled weights are
    extent-independent); it must stay divisible by 16.
    """
    cfg = model.config
    if extent is not None:
        h, w = (extent, extent) if isinstance(extent, int) else extent
        cfg = replace(cfg, height=h, width=w)
        model = CompiledModel(cfg, model.layers)
    if cfg.height % 16 or cfg.width % 16:
        raise ShapeError(f"bench extent {cfg.height}x{cfg.width} must be divisible by 16")
    rng = np.random.default_rng(seed)
    image = rng.random((1, cfg.height, cfg.width, cfg.in_channels))
    result = forward(model, image, threads=threads)  # warm-up + reference output
    t_bit = _median_time(lambda: forward(model, image, threads=threads), reps)
    t_float = agreement = None
    if include_float:
        t0 = time.perf_counter()
        _, dense_mask = dense_float_forward(model, image)
        t_float = time.perf_counter() - t0
        agreement = float(np.mean(dense_mask == result.mask))
    return ModelBench(
        (cfg.height, cfg.width), reps, threads, total_ops(cfg), t_bit, t_float, agreement
    )
