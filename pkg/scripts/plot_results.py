"""Figures from CLI outputs: weight heatmap, robustness curves, CL accuracy matrices.

Usage: python3 scripts/plot_results.py RESULTS_DIR
"""

import argparse
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_table(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def to_float(v):
    return float(v) if v != "" else np.nan


def plot_weights(path, out):
    _, rows = read_table(path)
    w = np.array([[to_float(v) for v in r[1:]] for r in rows])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(w, cmap="viridis", vmin=0.0)
    n = w.shape[0]
    ax.set_xticks(range(n), [str(i + 1) for i in range(n)])
    ax.set_yticks(range(n), [str(i + 1) for i in range(n)])
    ax.set_xlabel("source domain")
    ax.set_ylabel("target domain")
    for i in range(n):
        for j in range(n):
            if np.isfinite(w[i, j]):
                ax.text(j, i, f"{w[i, j]:.2f}", ha="center", va="center", color="w", fontsize=7)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def plot_robustness(path, out):
    _, rows = read_table(path)
    acc = {}
    for lam, loss, err, _ in rows:
        acc.setdefault(loss, {}).setdefault(float(lam), []).append(float(err))
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for loss, by_lam in sorted(acc.items()):
        lams = sorted(by_lam)
        mean = [np.mean(by_lam[l]) for l in lams]
        std = [np.std(by_lam[l]) for l in lams]
        ax.errorbar(lams, mean, yerr=std, marker="o", capsize=3, label=loss)
    ax.set_xlabel("noise scale lambda")
    ax.set_ylabel("clean-test RMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def plot_cl(path, out):
    metrics = json.loads(Path(path).read_text())["methods"]
    names = sorted(metrics)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for k, key in enumerate(("LA", "RA", "BT")):
        vals = [[m[key] for m in metrics[n].values()] for n in names]
        ax.bar(np.arange(len(names)) + 0.25 * (k - 1), [np.mean(v) for v in vals], 0.25,
               yerr=[np.std(v) for v in vals], capsize=2, label=key)
    ax.set_xticks(range(len(names)), names)
    ax.axhline(0.0, color="k", lw=0.5)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("results", type=Path)
    args = ap.parse_args()
    root = args.results
    jobs = [(root / "friedman" / "weights.csv", plot_weights, "weights.png"),
            (root / "robustness" / "robustness.csv", plot_robustness, "robustness.png"),
            (root / "cl" / "metrics.json", plot_cl, "cl_metrics.png")]
    for src, fn, name in jobs:
        if src.exists():
            fn(src, src.parent / name)
            print(f"wrote {src.parent / name}")
        else:
            print(f"skipped {src} (missing)")


if __name__ == "__main__":
    main()
