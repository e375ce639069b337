"""Engine-vs-reference equivalence driver for tests and the verify command.

Synthesizes random weight bundles, runs the packed engine and the dense
integer reference side by side, and compares every traced intermediate:
packed bit tensors and integer accumulators must match exactly; the float
endpoints (stem and head accumulators) compare to 1e-9, their summation
orders being the only difference.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import oracle
from .bitcore import BitTensor, unpack_tensor
from .graph import PrecisionMap, UNetConfig, build, forward
from .quantizer import dense_records, quantize_bundle, synthesize_bundle

__all__ = ["compare_traces", "verify_model", "verify_random_models"]

FLOAT_TOL = 1e-9


def _same_float(a, b) -> bool:
    return bool(np.allclose(a, b, rtol=FLOAT_TOL, atol=FLOAT_TOL))


def compare_traces(engine_trace: dict, ref_trace: dict) -> list:
    """Describe every disagreement between an engine and a reference trace."""
    problems = []
    for name, ref in ref_trace.items():
        if name == "mask":
            if not np.array_equal(engine_trace["mask"], ref):
                problems.append("mask: engine and reference masks differ")
            continue
        if name not in engine_trace:
            problems.append(f"{name}: layer missing from engine trace")
            continue
        eng = engine_trace[name]
        eng_out, ref_out = eng["out"], ref["out"]
        if isinstance(eng_out, BitTensor):
            if not np.array_equal(unpack_tensor(eng_out), ref_out):
                problems.append(f"{name}: packed output differs from reference")
        elif not _same_float(eng_out, ref_out):
            problems.append(f"{name}: float output differs from reference")
        eng_acc, ref_acc = eng.get("acc"), ref.get("acc")
        if eng_acc is None or ref_acc is None:
            continue
        if np.issubdtype(np.asarray(eng_acc).dtype, np.integer):
            if not np.array_equal(np.asarray(eng_acc, dtype=np.int64), ref_acc):
                problems.append(f"{name}: integer accumulators differ")
        elif not _same_float(eng_acc, ref_acc):
            problems.append(f"{name}: float accumulators differ")
    return problems


def verify_model(config: UNetConfig, rng: np.random.Generator, threads: int = 1) -> list:
    """Build one random model from ``rng`` and compare full forward traces."""
    bundle = synthesize_bundle(config, rng)
    model = build(config, bundle)
    records = dense_records(quantize_bundle(bundle, config), config)
    image = rng.random((1, config.height, config.width, config.in_channels))
    result = forward(model, image, threads=threads, trace=True)
    ref = oracle.ref_forward(config, records, image, binarize="threshold")
    return compare_traces(result.trace, ref)


def verify_random_models(
    config: UNetConfig,
    seed: int = 1,
    trials: int = 50,
    threads: int = 1,
    randomize_precision: bool = True,
    progress=None,
) -> list:
    """Run ``trials`` independent random models; returns the failure list.

    Each trial draws a fresh ConfigId (unless ``randomize_precision`` is
    off) and a fresh bundle. Entries are (trial, config_id, problem list);
    ``progress(trial, config_id, problems)`` fires after each trial.
    """
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(trials):
        if randomize_precision:
            cfg = replace(
                config, precision=PrecisionMap.from_config_id(int(rng.integers(4096)))
            )
        else:
            cfg = config
        problems = verify_model(cfg, rng, threads=threads)
        if problems:
            failures.append((trial, cfg.precision.config_id(), problems))
        if progress is not None:
            progress(trial, cfg.precision.config_id(), problems)
    return failures
