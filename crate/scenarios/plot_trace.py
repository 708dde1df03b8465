"""Plot gradient norm against iteration for solver trace CSVs."""

import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt


def main(paths):
    fig, ax = plt.subplots()
    for path in paths:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        ax.semilogy([int(r["iter"]) for r in rows], [float(r["grad_inf_norm"]) for r in rows], label=Path(path).stem)
    ax.set_xlabel("iteration")
    ax.set_ylabel("gradient inf-norm")
    ax.legend()
    out = "trace.png"
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit("usage: plot_trace.py TRACE.csv [TRACE.csv ...]")
    main(sys.argv[1:])
