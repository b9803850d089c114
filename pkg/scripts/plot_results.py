#!/usr/bin/env python3
"""Plot bound sweeps and evaluation histograms from the CSV artifacts.

Usage:
    python scripts/plot_results.py bounds  runs/*/bounds.csv -o bounds.png
    python scripts/plot_results.py eval    runs/lti/eval.csv -o eval.png

The CSV schemas are shared across methods and bound families, so the same
invocation works for any experiment output directory.
"""

import argparse
import csv
import sys


def read_rows(paths):
    rows = []
    for path in paths:
        with open(path) as handle:
            rows.extend(csv.DictReader(handle))
    return rows


def plot_bounds(rows, out):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    groups = {}
    for row in rows:
        key = (row["family"], float(row["delta"]))
        groups.setdefault(key, []).append(
            (int(row["s"]), float(row["upper"]), float(row["empirical_cost"])))
    for (family, delta), pts in sorted(groups.items()):
        pts.sort()
        s_vals = [p[0] for p in pts]
        ax.plot(s_vals, [p[1] for p in pts], marker="s",
                label=f"{family} upper, delta={delta:g}")
        emp = [p[2] for p in pts if p[2] == p[2]]  # drop NaN
        if emp:
            ax.scatter([p[0] for p in pts if p[2] == p[2]], emp, marker="o",
                       alpha=0.6)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("training sequences S")
    ax.set_ylabel("transformed cost")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def plot_eval(rows, out):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    costs = [float(r["transformed_cost"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(costs, bins=40)
    ax.set_xlabel("transformed cost")
    ax.set_ylabel("test sequences")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("kind", choices=["bounds", "eval"])
    parser.add_argument("csv", nargs="+")
    parser.add_argument("-o", "--out", default="plot.png")
    args = parser.parse_args()
    rows = read_rows(args.csv)
    if not rows:
        print("no rows found", file=sys.stderr)
        return 1
    if args.kind == "bounds":
        plot_bounds(rows, args.out)
    else:
        plot_eval(rows, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
