#!/usr/bin/env python3
"""Rank the configurable layers by cost score and print nested mask plans.

The score for each layer is w_op * normalized-ops + (1 - w_op) *
normalized-params; masking the cheapest layers first buys accuracy where it
costs the least. Running with no arguments reproduces the frozen-architecture
ranking at 512x512.
"""

from __future__ import annotations

import argparse

from bitunet.graph import UNetConfig, scale_config
from bitunet.planner import cost_scores, select_mask_plan


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--w-op", type=float, default=0.5,
                        help="weight on the op-count term (default 0.5)")
    parser.add_argument("--scale", type=int, default=1,
                        help="divide all channel widths by this factor")
    parser.add_argument("--extent", type=int, default=None,
                        help="square input extent (default: config height)")
    args = parser.parse_args()

    config = scale_config(UNetConfig(), args.scale)
    extent = (args.extent, args.extent) if args.extent else None
    report = cost_scores(config, args.w_op, extent=extent)
    print(report.to_text())
    print()
    print("nested mask plans (cheapest layers first):")
    for k in range(13):
        plan = select_mask_plan(report, k)
        print(f"  k={k:>2}  id 0x{plan.config_id():03x}  ({plan.config_id():>4})")


if __name__ == "__main__":
    main()
