"""Paired DT-native versus Traditional comparison over several seeds."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from scipy import stats

from ..errors import IoFailure
from .config import ExperimentConfig
from .experiment import run_experiment

COMPARE_FIELDS = ("sensors", "mode", "run", "mean_proc_ms", "mean_lat_ms")


def mean_ci(xs, level=0.95):
    """Mean and two-sided Student-t confidence interval."""
    xs = list(xs)
    m = statistics.fmean(xs) if xs else math.nan
    if len(xs) < 2:
        return m, (math.nan, math.nan)
    sem = statistics.stdev(xs) / math.sqrt(len(xs))
    if sem == 0:
        return m, (m, m)
    lo, hi = stats.t.interval(level, len(xs) - 1, loc=m, scale=sem)
    return m, (float(lo), float(hi))


def saving_pct(trad, dt):
    return 100.0 * (trad - dt) / trad


@dataclass
class SensorSummary:
    sensors: int
    runs: int
    proc: dict  # mode -> (mean, (lo, hi))
    lat: dict
    saving: float  # from mode means
    saving_ci: tuple  # t-interval of per-run paired savings
    latency_ratio: float  # dt-native / traditional mean latency

    def line(self) -> str:
        d, t = self.proc["dt-native"], self.proc["traditional"]
        ld, lt = self.lat["dt-native"], self.lat["traditional"]
        return (f"sensors={self.sensors:>3} runs={self.runs} "
                f"proc dt={d[0]:.2f} [{d[1][0]:.2f}, {d[1][1]:.2f}] ms "
                f"trad={t[0]:.2f} [{t[1][0]:.2f}, {t[1][1]:.2f}] ms "
                f"saving={self.saving:.1f}% [{self.saving_ci[0]:.1f}, {self.saving_ci[1]:.1f}] | "
                f"lat dt={ld[0]:.3f} [{ld[1][0]:.3f}, {ld[1][1]:.3f}] ms "
                f"trad={lt[0]:.3f} [{lt[1][0]:.3f}, {lt[1][1]:.3f}] ms "
                f"ratio={self.latency_ratio:.2f}")


@dataclass
class CompareReport:
    rows: list = field(default_factory=list)  # dicts keyed by COMPARE_FIELDS

    def summaries(self) -> list:
        out = []
        for s in sorted({r["sensors"] for r in self.rows}):
            by = {m: sorted((r for r in self.rows if r["sensors"] == s and r["mode"] == m),
                            key=lambda r: r["run"]) for m in ("dt-native", "traditional")}
            proc = {m: mean_ci(r["mean_proc_ms"] for r in rs) for m, rs in by.items()}
            lat = {m: mean_ci(r["mean_lat_ms"] for r in rs) for m, rs in by.items()}
            paired = [saving_pct(t["mean_proc_ms"], d["mean_proc_ms"])
                      for d, t in zip(by["dt-native"], by["traditional"])]
            out.append(SensorSummary(
                sensors=s, runs=len(paired), proc=proc, lat=lat,
                saving=saving_pct(proc["traditional"][0], proc["dt-native"][0]),
                saving_ci=mean_ci(paired)[1],
                latency_ratio=lat["dt-native"][0] / lat["traditional"][0]))
        return out

    def text(self) -> str:
        return "\n".join(s.line() for s in self.summaries())

    def write(self, path):
        write_rows(path, COMPARE_FIELDS, self.rows)


def write_rows(path, header, rows):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror or exc}") from None


def read_compare_csv(path) -> CompareReport:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [{"sensors": int(r["sensors"]), "mode": r["mode"], "run": int(r["run"]),
                     "mean_proc_ms": float(r["mean_proc_ms"]),
                     "mean_lat_ms": float(r["mean_lat_ms"])} for r in csv.DictReader(fh)]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror}") from None
    return CompareReport(rows)


def compare_modes(base: ExperimentConfig, sensors=(5, 20, 90), runs: int = 10,
                  sim=None, progress=None) -> CompareReport:
    """Run both modes ``runs`` times per sensor count, seeds ``base.seed + run``."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    report = CompareReport()
    for s in sensors:
        for run in range(runs):
            for mode in ("dt-native", "traditional"):
                cfg = replace(base, sensors=s, mode=mode, seed=base.seed + run,
                              out_dir=None if base.out_dir is None
                              else str(Path(base.out_dir) / f"s{s}" / mode / f"run{run}"))
                rep = run_experiment(cfg, sim)
                row = {"sensors": s, "mode": mode, "run": run,
                       "mean_proc_ms": rep.mean_proc_ms, "mean_lat_ms": rep.mean_lat_ms}
                report.rows.append(row)
                if progress:
                    progress(rep)
    return report
