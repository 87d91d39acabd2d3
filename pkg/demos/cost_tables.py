"""Sharing arithmetic from the published per-module costs, then the same report measured on a model.

    python demos/cost_tables.py
"""
from scanshare.accounting import (PUBLISHED_TABLE2, PUBLISHED_TABLE3, cost_report, format_table2,
                                  late_split_from_table, split_sharing_report, table_totals)
from scanshare.model import ModelConfig, SplitConfig, build_model


def main():
    print("published per-module costs (params M, GFLOPS)")
    print(format_table2(PUBLISHED_TABLE2), end="")
    totals = table_totals(PUBLISHED_TABLE2)
    print(f"\nparams {totals.params_total} M total, {totals.params_trainable} M trainable")
    print(f"GFLOPS {totals.flops_total} total, {totals.flops_trainable} on the trainable path")
    row = late_split_from_table(PUBLISHED_TABLE2).row("LS")
    print(f"LS: {row.params_pct}% fewer trainable params (published {PUBLISHED_TABLE3['LS'][0]}), "
          f"{row.flops_pct}% FLOPs shared (published {PUBLISHED_TABLE3['LS'][1]})")

    cfg = ModelConfig(feature_dim=32)
    size = (64, 64)
    print(f"\nmeasured on a D={cfg.feature_dim} model at {size[0]}x{size[1]}")
    print(cost_report(build_model(cfg, SplitConfig(6)), size).to_text(), end="")
    print()
    print(split_sharing_report(cfg, size).to_text(), end="")


if __name__ == "__main__":
    main()
