"""Learning-rate sweep: one learner per (combo, seed)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import InvalidConfig
from ..learner.ddpg import LR_BOUNDS, DdpgConfig
from ..learner.env import make_env
from ..learner.train import train
from .compare import write_rows

DEFAULT_COMBOS = ((0.001, 0.002), (0.01, 0.02), (0.1, 0.2))
SUMMARY_FIELDS = ("combo", "lr_actor", "lr_critic", "seed", "final_mean_loss", "final_mean_reward")


def combo_label(combo) -> str:
    return f"({combo[0]:g},{combo[1]:g})"


@dataclass
class SweepReport:
    combos: tuple
    seeds: tuple
    logs: dict = field(default_factory=dict)  # (combo, seed) -> TrainingLog
    last: int = 20

    def final_loss(self, combo, seed) -> float:
        return self.logs[(tuple(combo), seed)].final_mean_loss(self.last)

    def final_reward(self, combo, seed) -> float:
        rows = self.logs[(tuple(combo), seed)].rows[-self.last:]
        return sum(r["mean_reward"] for r in rows) / len(rows)

    def summary_rows(self):
        return [{"combo": combo_label(c), "lr_actor": c[0], "lr_critic": c[1], "seed": s,
                 "final_mean_loss": self.final_loss(c, s),
                 "final_mean_reward": self.final_reward(c, s)}
                for c in self.combos for s in self.seeds]

    def text(self) -> str:
        lines = [f"final-{self.last}-episode mean critic loss"]
        head = "seed  " + "  ".join(f"{combo_label(c):>16}" for c in self.combos)
        lines.append(head)
        for s in self.seeds:
            lines.append(f"{s:<4}  " + "  ".join(f"{self.final_loss(c, s):>16.6g}"
                                                 for c in self.combos))
        return "\n".join(lines)

    def write(self, out_dir):
        out = Path(out_dir)
        for (c, s), log in sorted(self.logs.items()):
            log.write_csv(out / f"sweep_{c[0]:g}_{c[1]:g}_seed{s}.csv",
                          extra={"combo": combo_label(c)})
        write_rows(out / "sweep_summary.csv", SUMMARY_FIELDS, self.summary_rows())


def check_combos(combos):
    bad = {combo_label(c): f"learning rates must lie in [{LR_BOUNDS[0]}, {LR_BOUNDS[1]}]"
           for c in combos
           if len(c) != 2 or not all(LR_BOUNDS[0] <= x <= LR_BOUNDS[1] for x in c)}
    if bad:
        raise InvalidConfig(bad)


def sweep_learning_rates(combos=DEFAULT_COMBOS, episodes: int = 135, seeds=5,
                         sensors: int = 20, base: DdpgConfig = None, sim=None,
                         progress=None) -> SweepReport:
    """``seeds`` is a count (seeds 0..n-1) or an explicit sequence."""
    combos = tuple(tuple(float(x) for x in c) for c in combos)
    check_combos(combos)
    seeds = tuple(range(seeds)) if isinstance(seeds, int) else tuple(seeds)
    base = base or DdpgConfig()
    report = SweepReport(combos, seeds)
    for seed in seeds:
        for c in combos:
            cfg = replace(base, lr_actor=c[0], lr_critic=c[1], episodes=episodes, seed=seed)
            env = make_env(sim, sensors=sensors, seed=seed,
                           congestion_weight=cfg.congestion_weight,
                           overflow_weight=cfg.overflow_weight)
            report.logs[(c, seed)] = train(env, cfg)
            if progress:
                progress(c, seed, report.final_loss(c, seed))
    return report


def ordering_holds(report: SweepReport, seed) -> dict:
    """Per-seed checks: fast < mid loss, and slow loss above fast."""
    slow, mid, fast = DEFAULT_COMBOS
    f = {c: report.final_loss(c, seed) for c in (slow, mid, fast)}
    ok = all(not math.isnan(v) for v in f.values())
    return {"fast_below_mid": ok and f[fast] < f[mid],
            "slow_above_fast": ok and f[slow] > f[fast], "losses": f}
