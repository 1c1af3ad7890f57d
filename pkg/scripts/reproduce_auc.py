#!/usr/bin/env python3
"""Recompute the AUC of the published accuracy-vs-observation rows."""
import sys

from earlyproto.metrics import PUBLISHED, AccuracyCurve, auc


def main():
    worst = 0.0
    for name, (ratios, acc, expected) in PUBLISHED.items():
        got = auc(AccuracyCurve(ratios, acc))
        worst = max(worst, abs(got - expected))
        print(f"{name:7s} published {expected:7.2f}  recomputed {got:8.4f}")
    print(f"max abs difference {worst:.4f}")
    return 0 if worst <= 0.01 else 1


if __name__ == "__main__":
    sys.exit(main())
