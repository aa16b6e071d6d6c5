#!/usr/bin/env python3
"""
Plot mean MAE against the target/source ratio from an aggregate.csv.

Usage:
    python tools/plot_results.py results/aggregate.csv --out results/mae.png
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_aggregate(frame: pd.DataFrame, ax: plt.Axes, title: str = "") -> None:
    for method, rows in frame.sort_values("r").groupby("method", sort=False):
        rows = rows.dropna(subset=["mean_mae"])
        errors = [rows["mean_mae"] - rows["ci_low"], rows["ci_high"] - rows["mean_mae"]]
        ax.errorbar(rows["r"], rows["mean_mae"], yerr=errors, marker="o", capsize=3, label=method)
    ax.set_xlabel("r = n_target / n_source")
    ax.set_ylabel("mean MAE")
    ax.set_title(title)
    ax.legend()


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("aggregate", type=Path)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--title", default="")
    args = parser.parse_args()

    frame = pd.read_csv(args.aggregate)
    fig, ax = plt.subplots(figsize=(6, 4))
    plot_aggregate(frame, ax, args.title)
    fig.tight_layout()
    out = args.out or args.aggregate.with_suffix(".png")
    fig.savefig(out, dpi=150)
    print(f"Saved {out}")


if __name__ == "__main__":
    main()
