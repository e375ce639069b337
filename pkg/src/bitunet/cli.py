"""Command-line interface: quantize, infer, profile, plan, analyze, verify, bench.

Exit codes:

====  ==========================================================
0     success
1     internal error (unexpected exception)
2     usage error (bad flags/arguments)
3     file format error (model/tensor/image/bundle/results parse)
4     unsupported or invalid configuration
5     shape or layout mismatch
6     verification found engine/reference disagreements
====  ==========================================================

Config files are plain text, one ``key value...`` pair per line, ``#``
comments allowed; keys mirror the UNetConfig fields::

    in_channels 3
    height 512
    width 512
    stem_channels 64
    encoder_channels 128 256 512 512
    tconv_channels 384 192 96 48
    decoder_channels 256 128 64 64
    out_channels 1
    precision all-masked      # or all-binary, a 12-bit id (0x0F3), or
                              # a comma-separated masked-label list
    stem2_float false
    pad_mode neg_one          # or zero

Omitted keys keep their defaults. The default worker-pool size comes from
the BITUNET_THREADS environment variable, falling back to the CPU count.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import micro_bench, model_bench
from .errors import (
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
    PrecisionMap,
    UNetConfig,
    build,
    forward,
    scale_config,
    validate,
)
from .imageio import read_image, write_mask
from .modelfile import read_model, write_model, write_tensor
from .planner import (
    cost_scores,
    marginal_contribution,
    parse_results_csv,
    profile_table,
    select_mask_plan,
    total_params,
)
from .quantizer import (
    DEFAULT_TERNARY_T,
    load_bundle,
    quantize_bundle,
    sparsity,
    ternary_planes,
)
from .verify import verify_random_models

__all__ = ["main", "parse_config_text", "format_config", "load_config"]

_USAGE_EXIT = 2
_FORMAT_EXIT = 3
_CONFIG_EXIT = 4
_SHAPE_EXIT = 5
_VERIFY_EXIT = 6
_INTERNAL_EXIT = 1

_SCALAR_KEYS = ("in_channels", "height", "width", "stem_channels", "out_channels")
_SCHEDULE_KEYS = ("encoder_channels", "tconv_channels", "decoder_channels")


# --------------------------------------------------------------------------- #
# config text format
# --------------------------------------------------------------------------- #


def _parse_precision(token: str, where: str) -> PrecisionMap:
    if token == "all-masked":
        return PrecisionMap.all_masked()
    if token == "all-binary":
        return PrecisionMap.all_binary()
    try:
        return PrecisionMap.from_config_id(int(token, 0))
    except ValueError:
        pass
    except UnsupportedConfigError as exc:
        raise FormatError(str(exc), where=where) from exc
    labels = frozenset(p.strip() for p in token.split(",") if p.strip())
    try:
        return PrecisionMap(labels)
    except UnsupportedConfigError as exc:
        raise FormatError(str(exc), where=where) from exc


def parse_config_text(text: str, source: str = "<config>") -> UNetConfig:
    """Parse the documented key/value config grammar into a UNetConfig."""
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key in fields:
            raise FormatError(f"duplicate key {key!r}", where=where)
        if key in _SCALAR_KEYS:
            if len(rest) != 1 or not rest[0].lstrip("-").isdigit():
                raise FormatError(f"{key} takes one integer", where=where)
            fields[key] = int(rest[0])
        elif key in _SCHEDULE_KEYS:
            if len(rest) != 4 or not all(t.isdigit() for t in rest):
                raise FormatError(f"{key} takes four positive integers", where=where)
            fields[key] = tuple(int(t) for t in rest)
        elif key == "precision":
            if len(rest) != 1:
                raise FormatError("precision takes one token", where=where)
            fields[key] = _parse_precision(rest[0], where)
        elif key == "stem2_float":
            if len(rest) != 1 or rest[0] not in ("true", "false"):
                raise FormatError("stem2_float takes true or false", where=where)
            fields[key] = rest[0] == "true"
        elif key == "pad_mode":
            if len(rest) != 1 or rest[0] not in ("neg_one", "zero"):
                raise FormatError("pad_mode takes neg_one or zero", where=where)
            fields[key] = rest[0]
        else:
            raise FormatError(f"unknown key {key!r}", where=where)
    config = UNetConfig(**fields)
    problems = validate(config)
    if problems:
        raise UnsupportedConfigError(f"{source}: " + "; ".join(problems))
    return config


def format_config(config: UNetConfig) -> str:
    """Render a UNetConfig in the text grammar (parse round-trips exactly)."""
    masked = config.precision.masked_count()
    if masked == 12:
        precision = "all-masked"
    elif masked == 0:
        precision = "all-binary"
    else:
        precision = f"0x{config.precision.config_id():03x}"
    lines = [f"{key} {getattr(config, key)}" for key in _SCALAR_KEYS]
    lines += [
        f"{key} {' '.join(str(v) for v in getattr(config, key))}"
        for key in _SCHEDULE_KEYS
    ]
    lines += [
        f"precision {precision}",
        f"stem2_float {'true' if config.stem2_float else 'false'}",
        f"pad_mode {config.pad_mode}",
    ]
    return "\n".join(lines) + "\n"


def load_config(path) -> UNetConfig:
    """Read a config file; ``None`` yields the default configuration."""
    if path is None:
        return UNetConfig()
    return parse_config_text(Path(path).read_text(), source=str(path))


# --------------------------------------------------------------------------- #
# shared helpers
# --------------------------------------------------------------------------- #


def _default_threads() -> int:
    env = os.environ.get("BITUNET_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise UnsupportedConfigError(
                f"BITUNET_THREADS must be an integer, got {env!r}"
            ) from exc
        if n < 1:
            raise UnsupportedConfigError(f"BITUNET_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def _resolve_threads(args) -> int:
    n = args.threads if args.threads is not None else _default_threads()
    if n < 1:
        raise UnsupportedConfigError(f"--threads must be >= 1, got {n}")
    return n


def _base_config(args) -> UNetConfig:
    config = load_config(getattr(args, "config", None))
    if getattr(args, "scale", None) and args.scale != 1:
        config = scale_config(config, args.scale)
    if getattr(args, "extent", None):
        config = replace(config, height=args.extent[0], width=args.extent[1])
        problems = validate(config)
        if problems:
            raise UnsupportedConfigError("; ".join(problems))
    return config


def _extent(value: str):
    parts = value.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"extent must be N or HxW, got {value!r}")
    return (h, w)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def _cmd_quantize(args) -> int:
    bundle = load_bundle(args.bundle)
    config = load_config(args.config)
    model = build(config, bundle, ternary_t=args.ternary_t)
    write_model(model, args.out)
    masked = config.precision.masked_count()
    print(
        f"wrote {args.out}: {len(model.layers)} layers, "
        f"{total_params(config)} parameters, {masked}/12 masked"
    )
    if args.sparsity:
        prepared = quantize_bundle(bundle, config, args.ternary_t)
        planes = {
            name: ternary_planes(p.weights.reshape(-1))
            for name, p in sorted(prepared.items())
            if p.kind == "masked"
        }
        print(sparsity(planes).to_text())
    return 0


def _cmd_infer(args) -> int:
    model = read_model(args.model)
    image = read_image(args.image)
    cfg = model.config
    if image.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
        raise ShapeError(
            f"image {args.image} has shape {image.shape[1:]}, model wants "
            f"({cfg.height}, {cfg.width}, {cfg.in_channels})"
        )
    result = forward(model, image, threads=_resolve_threads(args))
    if args.mask_out:
        if cfg.out_channels != 1:
            raise UnsupportedConfigError(
                f"mask output needs a 1-channel head, model has {cfg.out_channels}"
            )
        write_mask(args.mask_out, result.mask[0, :, :, 0])
        print(f"wrote {args.mask_out}")
    if args.logits_out:
        write_tensor(args.logits_out, np.asarray(result.logits, dtype=np.float64))
        print(f"wrote {args.logits_out}")
    return 0


def _cmd_profile(args) -> int:
    config = _base_config(args)
    extent = (config.height, config.width)
    rows = profile_table(config, extent)
    if args.csv:
        print("label,ops,params")
        for label, ops, params in rows:
            print(f"{label},{ops},{params}")
    else:
        print(f"per-layer cost at {extent[0]}x{extent[1]}")
        print(f"{'label':<8} {'ops':>16} {'params':>10}")
        for label, ops, params in rows:
            print(f"{label:<8} {ops:>16} {params:>10}")
        print(f"{'total':<8} {sum(r[1] for r in rows):>16} {sum(r[2] for r in rows):>10}")
    return 0


def _cmd_plan(args) -> int:
    config = _base_config(args)
    report = cost_scores(config, args.w_op)
    print(report.to_csv() if args.csv else report.to_text())
    if args.k is not None:
        plan = select_mask_plan(report, args.k)
        labels = [l for l in CONFIGURABLE_LABELS if l in plan.masked_labels]
        print(
            f"mask plan k={args.k}: id 0x{plan.config_id():03x}"
            f" ({plan.config_id()}) masking {', '.join(labels) if labels else 'nothing'}"
        )
    return 0


def _cmd_analyze(args) -> int:
    table = parse_results_csv(args.results)
    report = marginal_contribution(table, args.max_masked)
    print(report.to_csv() if args.csv else report.to_text())
    return 0


def _cmd_verify(args) -> int:
    config = _base_config(args)
    threads = _resolve_threads(args)

    def progress(trial, config_id, problems):
        status = "exact" if not problems else "; ".join(problems)
        print(f"trial {trial + 1:>3}/{args.trials} id 0x{config_id:03x}: {status}")

    failures = verify_random_models(
        config,
        seed=args.seed,
        trials=args.trials,
        threads=threads,
        progress=progress if args.verbose else None,
    )
    print(f"{args.trials - len(failures)}/{args.trials} exact")
    return 0 if not failures else _VERIFY_EXIT


def _cmd_bench(args) -> int:
    threads = _resolve_threads(args)
    ran = False
    if args.model:
        model = read_model(args.model)
        extent = args.extent or (128, 128)
        result = model_bench(
            model,
            extent=extent,
            reps=args.reps,
            threads=threads,
            include_float=not args.no_float,
        )
        print(result.to_csv() if args.csv else result.to_text())
        ran = True
    if args.micro or not ran:
        micro = micro_bench(
            channels=args.channels,
            extent=(args.extent or (64, 64))[0],
            kernel=args.kernel,
            reps=args.reps,
            threads=threads,
            include_oracle=not args.no_oracle,
        )
        print(micro.to_csv() if args.csv else micro.to_text())
    return 0


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #


def _add_threads(p):
    p.add_argument(
        "--threads", type=int, default=None,
        help="worker pool size (default: $BITUNET_THREADS or CPU count)",
    )


def _add_config(p):
    p.add_argument("--config", help="config file (default: built-in architecture)")
    p.add_argument(
        "--scale", type=int, default=1,
        help="divide every channel width (e.g. 4 for a base-16 test model)",
    )
    p.add_argument(
        "--extent", type=_extent, default=None,
        help="override the input extent, N or HxW (divisible by 16)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitunet",
        description="Masked-binary U-Net inference engine and analysis toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("quantize", help="quantize a float bundle into a model file")
    p.add_argument("--bundle", required=True, help="weight bundle directory")
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--ternary-t", type=float, default=DEFAULT_TERNARY_T,
                   help="masked-weight threshold factor (default 0.7 * mean |w|)")
    p.add_argument("--sparsity", action="store_true",
                   help="print masked-layer zero/+1/-1 fractions")
    p.set_defaults(handler=_cmd_quantize)

    p = sub.add_parser("infer", help="run a model on an image")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--image", required=True, help="input image (P5 PGM or P6 PPM)")
    p.add_argument("--mask-out", default=None, help="write the mask as P5 {0,255}")
    p.add_argument("--logits-out", default=None, help="write raw logits (f64 tensor file)")
    _add_threads(p)
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("profile", help="per-layer op/param table")
    _add_config(p)
    p.add_argument("--csv", action="store_true", help="comma-separated output")
    p.set_defaults(handler=_cmd_profile)

    p = sub.add_parser("plan", help="cost scores, ranking, and mask plans")
    _add_config(p)
    p.add_argument("--w-op", type=float, default=0.5,
                   help="op-count weight in [0,1]; param weight is 1 - w_op")
    p.add_argument("--k", type=int, default=None,
                   help="also select a plan masking the k cheapest layers")
    p.add_argument("--csv", action="store_true", help="comma-separated output")
    p.set_defaults(handler=_cmd_plan)

    p = sub.add_parser("analyze", help="marginal Dice gains from a results table")
    p.add_argument("--results", required=True, help="csv table: config_id,dice")
    p.add_argument("--max-masked", type=int, default=5,
                   help="only average pairs below this many masked layers")
    p.add_argument("--csv", action="store_true", help="comma-separated output")
    p.set_defaults(handler=_cmd_analyze)

    p = sub.add_parser("verify", help="engine vs reference on random models")
    _add_config(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--verbose", action="store_true", help="print one line per trial")
    _add_threads(p)
    p.set_defaults(handler=_cmd_verify)

    p = sub.add_parser("bench", help="throughput: bit path vs float reference")
    p.add_argument("--model", default=None, help="model file (omit for micro only)")
    p.add_argument("--extent", type=_extent, default=None,
                   help="bench extent, N or HxW (model default 128)")
    p.add_argument("--reps", type=int, default=3, help="bit-path repetitions")
    p.add_argument("--micro", action="store_true",
                   help="also time one masked conv against naive references")
    p.add_argument("--channels", type=int, default=256, help="micro conv channels")
    p.add_argument("--kernel", type=int, default=3, help="micro conv kernel")
    p.add_argument("--no-float", action="store_true",
                   help="skip the slow naive-float model pass")
    p.add_argument("--no-oracle", action="store_true",
                   help="skip the slow integer-oracle micro pass")
    p.add_argument("--csv", action="store_true", help="comma-separated output")
    _add_threads(p)
    p.set_defaults(handler=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _FORMAT_EXIT
    except (UnsupportedConfigError, ValueAlphabetError, PlaneOverlapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _CONFIG_EXIT
    except (ShapeError, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _SHAPE_EXIT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _FORMAT_EXIT
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _INTERNAL_EXIT
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _INTERNAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
