"""Training loop and the per-episode log."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IoFailure
from .ddpg import (
    DdpgConfig,
    DdpgNets,
    ReplayBuffer,
    Transition,
    actor_update,
    critic_update,
    hard_update,
    select_action,
    soft_update,
)

LOG_FIELDS = ("episode", "mean_critic_loss", "mean_reward", "epsilon_sigma",
              "lr_actor", "lr_critic", "seed")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    updates: int = 0
    nets: object = field(default=None, repr=False, compare=False)

    def losses(self):
        return [r["mean_critic_loss"] for r in self.rows]

    def final_mean_loss(self, last: int = 20) -> float:
        xs = [x for x in self.losses()[-last:] if not math.isnan(x)]
        return float(np.mean(xs)) if xs else math.nan

    def write_csv(self, path, extra=None):
        """``extra`` maps additional leading columns (e.g. a combo label) to values."""
        extra = extra or {}
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(list(extra) + list(LOG_FIELDS))
                for r in self.rows:
                    w.writerow(list(extra.values()) + [
                        repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS])
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc.strerror}") from None


def train(env, cfg: DdpgConfig, checkpoint=None, on_episode=None) -> TrainingLog:
    """Run ``cfg.episodes`` episodes of ``cfg.steps_per_episode`` windows each.

    ``checkpoint(nets, episode)`` is called after every episode when given.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    nets = DdpgNets.create(rng, cfg.hidden)
    buf = ReplayBuffer(cfg.buffer_capacity)
    log = TrainingLog()
    for ep in range(1, cfg.episodes + 1):
        s = env.reset()
        losses, rewards = [], []
        for k in range(cfg.steps_per_episode):
            a = select_action(nets.actor, s, cfg.noise_sigma, rng)
            s_next, r, _ = env.step(a)
            done = k == cfg.steps_per_episode - 1
            buf.push(Transition(s, a, r, s_next, done))
            rewards.append(r)
            s = s_next
            if len(buf) < cfg.batch:
                continue
            batch = buf.sample(cfg.batch, rng)
            losses.append(critic_update(batch, nets, cfg))
            actor_update(batch, nets, cfg)
            log.updates += 1
            if cfg.hard_update_every:
                if log.updates % cfg.hard_update_every == 0:
                    hard_update(nets.actor_target, nets.actor)
                    hard_update(nets.critic_target, nets.critic)
            else:
                soft_update(nets.actor_target, nets.actor, cfg.tau)
                soft_update(nets.critic_target, nets.critic, cfg.tau)
        row = {"episode": ep,
               "mean_critic_loss": float(np.mean(losses)) if losses else math.nan,
               "mean_reward": float(np.mean(rewards)),
               "epsilon_sigma": cfg.noise_sigma, "lr_actor": cfg.lr_actor,
               "lr_critic": cfg.lr_critic, "seed": cfg.seed}
        log.rows.append(row)
        if checkpoint is not None:
            checkpoint(nets, ep)
        if on_episode is not None:
            on_episode(row)
    log.nets = nets
    return log
