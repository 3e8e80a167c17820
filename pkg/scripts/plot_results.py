"""Figures from the CLI's CSV output (needs the ``plot`` extra: matplotlib).

    python3 scripts/plot_results.py --compare out/compare.csv --sweep out/sweep --out figs/
"""

import argparse
import csv
import glob
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dtnative.bench.compare import mean_ci, read_compare_csv  # noqa: E402


def plot_compare(path, out):
    report = read_compare_csv(path)
    sums = report.summaries()
    xs = [s.sensors for s in sums]
    for metric, attr, fname in (("processing time", "proc", "processing_time.png"),
                                ("latency", "lat", "latency.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for i, mode in enumerate(("traditional", "dt-native")):
            means = [getattr(s, attr)[mode][0] for s in sums]
            errs = [means[k] - getattr(s, attr)[mode][1][0] for k, s in enumerate(sums)]
            pos = [k + (i - 0.5) * 0.35 for k in range(len(xs))]
            ax.bar(pos, means, 0.35, yerr=errs, capsize=3, label=mode)
        ax.set_xticks(range(len(xs)), [str(x) for x in xs])
        ax.set_xlabel("sensors")
        ax.set_ylabel(f"mean {metric} (ms)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(out, fname), dpi=150)
        plt.close(fig)


def plot_sweep(directory, out):
    curves = defaultdict(lambda: defaultdict(list))
    for path in sorted(glob.glob(os.path.join(directory, "sweep_*_seed*.csv"))):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curves[row["combo"]][int(row["episode"])].append(float(row["mean_critic_loss"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for combo, by_ep in curves.items():
        eps = sorted(by_ep)
        ys = [mean_ci([v for v in by_ep[e] if v == v])[0] for e in eps]
        ax.plot(eps, ys, label=combo)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean critic loss")
    ax.set_yscale("log")
    ax.legend(title="(lr actor, lr critic)")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "learning_rates.png"), dpi=150)
    plt.close(fig)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--compare", help="compare.csv from `dtnative compare --out`")
    p.add_argument("--sweep", help="directory from `dtnative sweep --out`")
    p.add_argument("--out", default="figs")
    a = p.parse_args()
    os.makedirs(a.out, exist_ok=True)
    if a.compare:
        plot_compare(a.compare, a.out)
    if a.sweep:
        plot_sweep(a.sweep, a.out)


if __name__ == "__main__":
    main()
