#!/usr/bin/env python3
"""Parameter/FLOP reconciliation table for all variants.

Prints deploy-form totals for each variant (plus the reduced-head ablation)
against the reference budgets, with signed deviations.
"""

from __future__ import annotations

import argparse

from facelivt import cost_report, variant_config
from facelivt.cli import REFERENCE_BUDGETS


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--form", choices=["train", "deploy"], default="deploy")
    args = parser.parse_args()

    rows = [("s", 16), ("m", 16), ("s-li", 16), ("m-li", 16), ("s-li", 8)]
    print(f"{'variant':8} {'heads':>5} {'params':>12} {'flops':>14} {'vs reference':>28}")
    for name, heads in rows:
        config = variant_config(name).with_heads(heads)
        report = cost_report(config, form=args.form)
        budget = REFERENCE_BUDGETS.get((name, heads))
        if budget:
            p_ref, f_ref = budget
            note = (
                f"params {100 * (report.total_params - p_ref) / p_ref:+.2f}%, "
                f"flops {100 * (report.total_flops - f_ref) / f_ref:+.2f}%"
            )
        else:
            note = "(no reference)"
        print(f"{name:8} {heads:>5} {report.total_params:>12} {report.total_flops:>14} {note:>28}")


if __name__ == "__main__":
    main()
