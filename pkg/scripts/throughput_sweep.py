#!/usr/bin/env python3
"""Sweep the bit-path convolution benchmark across channel widths.

For each channel count, times one masked 3x3 convolution at the given extent
on the bit-packed path and on the naive float reference, and reports the
speedup. The dense oracle is much slower, so it is only timed when
--with-oracle is passed.
"""

from __future__ import annotations

import argparse

from bitunet.bench import micro_bench


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--channels", type=int, nargs="+",
                        default=[64, 128, 192, 256, 384, 512])
    parser.add_argument("--extent", type=int, default=64)
    parser.add_argument("--kernel", type=int, default=3)
    parser.add_argument("--reps", type=int, default=3)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--with-oracle", action="store_true",
                        help="also time the dense reference oracle")
    args = parser.parse_args()

    print(f"{'channels':>8} {'Gop/s':>8} {'vs float':>9} {'vs oracle':>10}")
    for c in args.channels:
        r = micro_bench(
            channels=c,
            extent=args.extent,
            kernel=args.kernel,
            reps=args.reps,
            threads=args.threads,
            include_oracle=args.with_oracle,
        )
        gops = r.n_ops / r.t_bit / 1e9
        oracle = f"{r.speedup_oracle:>9.1f}x" if r.t_oracle is not None else f"{'-':>10}"
        print(f"{c:>8} {gops:>8.1f} {r.speedup_naive:>8.1f}x {oracle}")


if __name__ == "__main__":
    main()
