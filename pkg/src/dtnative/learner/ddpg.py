"""Deep deterministic policy gradient on top of :mod:`mlp`.

The actor emits a normalized action ``u`` in [-1, 1]^3 (Tanh head); the
physical action is the affine image of ``u`` in the action bounds. The
critic consumes ``(state, u)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import EmptyBatch, InvalidConfig, IoFailure, ShapeMismatch
from ..events import GREEN_RATIO_BOUNDS, SAMPLING_PERIOD_BOUNDS, SPEED_LIMIT_BOUNDS
from .mlp import AdamState, Mlp, adam_update_, check_same_shapes

ACTION_LOW = np.array([SPEED_LIMIT_BOUNDS[0], GREEN_RATIO_BOUNDS[0], SAMPLING_PERIOD_BOUNDS[0]])
ACTION_HIGH = np.array([SPEED_LIMIT_BOUNDS[1], GREEN_RATIO_BOUNDS[1], SAMPLING_PERIOD_BOUNDS[1]])
STATE_DIM = 5
ACTION_DIM = 3
LR_BOUNDS = (0.001, 0.2)


@dataclass
class DdpgConfig:
    lr_actor: float = 0.001
    lr_critic: float = 0.002
    gamma: float = 0.8
    batch: int = 256
    tau: float = 0.005
    hard_update_every: int = 0  # > 0 replaces soft updates with periodic copies
    noise_sigma: float = 0.1
    episodes: int = 135
    steps_per_episode: int = 50
    buffer_capacity: int = 100_000
    hidden: int = 64
    seed: int = 0
    congestion_weight: float = 1.0
    overflow_weight: float = 0.1

    def validate(self):
        p = {}
        for name in ("lr_actor", "lr_critic"):
            v = getattr(self, name)
            if not LR_BOUNDS[0] <= v <= LR_BOUNDS[1]:
                p[name] = f"must be in [{LR_BOUNDS[0]}, {LR_BOUNDS[1]}], got {v!r}"
        if not 0.0 < self.gamma < 1.0:
            p["gamma"] = "must be in (0, 1)"
        if not 0.0 <= self.tau <= 1.0:
            p["tau"] = "must be in [0, 1]"
        for name in ("batch", "episodes", "steps_per_episode", "buffer_capacity", "hidden"):
            if int(getattr(self, name)) < 1:
                p[name] = "must be >= 1"
        if self.noise_sigma < 0:
            p["noise_sigma"] = "must be >= 0"
        if self.hard_update_every < 0:
            p["hard_update_every"] = "must be >= 0"
        if p:
            raise InvalidConfig(p)
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidConfig({k: "unknown field" for k in sorted(extra)})
        return cls(**d).validate()


def to_action(u):
    """Normalized [-1, 1] -> physical action bounds."""
    u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
    return ACTION_LOW + (u + 1.0) * 0.5 * (ACTION_HIGH - ACTION_LOW)


def to_normalized(a):
    a = np.asarray(a, dtype=np.float64)
    return 2.0 * (a - ACTION_LOW) / (ACTION_HIGH - ACTION_LOW) - 1.0


def actor_net(rng, hidden=64, state_dim=STATE_DIM):
    return Mlp.init([state_dim, hidden, hidden, ACTION_DIM], ["relu", "relu", "tanh"], rng)


def critic_net(rng, hidden=64, state_dim=STATE_DIM):
    return Mlp.init([state_dim + ACTION_DIM, hidden, hidden, 1], ["relu", "relu", "identity"], rng)


class DdpgNets:
    def __init__(self, actor: Mlp, critic: Mlp):
        self.actor = actor
        self.critic = critic
        self.actor_target = actor.copy()
        self.critic_target = critic.copy()
        self.actor_opt = AdamState(actor.params())
        self.critic_opt = AdamState(critic.params())

    @classmethod
    def create(cls, rng, hidden=64, state_dim=STATE_DIM):
        return cls(actor_net(rng, hidden, state_dim), critic_net(rng, hidden, state_dim))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Ring buffer; batches are uniform without replacement."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, action_dim: int = ACTION_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        i = self.head
        self.s[i], self.a[i], self.r[i] = t.s, t.a, t.r
        self.s_next[i], self.done[i] = t.s_next, float(t.done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng) -> np.ndarray:
        if batch > self.size:
            raise EmptyBatch(f"need {batch} transitions, have {self.size}")
        return rng.choice(self.size, size=batch, replace=False)

    def sample(self, batch: int, rng):
        idx = self.sample_indices(batch, rng)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray  # physical units
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    @classmethod
    def of(cls, transitions):
        if not transitions:
            raise EmptyBatch("empty batch")
        return cls(np.array([t.s for t in transitions], dtype=np.float64),
                   np.array([t.a for t in transitions], dtype=np.float64),
                   np.array([t.r for t in transitions], dtype=np.float64),
                   np.array([t.s_next for t in transitions], dtype=np.float64),
                   np.array([float(t.done) for t in transitions]))

    def __len__(self):
        return len(self.r)


def bellman_target(r, gamma, q_next, done):
    """``r + gamma * q_next``, with ``q_next`` masked out on terminal transitions."""
    done = np.asarray(done, dtype=np.float64)
    return np.asarray(r, dtype=np.float64) + gamma * (1.0 - done) * np.asarray(q_next, dtype=np.float64)


def _as_batch(batch):
    b = batch if isinstance(batch, Batch) else Batch.of(list(batch))
    if len(b) == 0:
        raise EmptyBatch("empty batch")
    return b


def critic_targets(b: Batch, nets: DdpgNets, gamma: float):
    u_next = nets.actor_target.forward(b.s_next)
    q_next = nets.critic_target.forward(np.hstack([b.s_next, u_next]))[:, 0]
    return bellman_target(b.r, gamma, q_next, b.done)


def critic_loss_and_grads(b: Batch, nets: DdpgNets, y):
    x = np.hstack([b.s, to_normalized(b.a)])
    q = nets.critic.forward(x)[:, 0]
    diff = y - q
    loss = float(np.mean(diff * diff))
    grads, _ = nets.critic.backward((-2.0 / len(b) * diff)[:, None])
    return loss, grads


def critic_update(batch, nets: DdpgNets, cfg: DdpgConfig) -> float:
    """One Adam step on the critic's mean squared Bellman error; returns the loss."""
    b = _as_batch(batch)
    y = critic_targets(b, nets, cfg.gamma)
    loss, grads = critic_loss_and_grads(b, nets, y)
    adam_update_(nets.critic.params(), grads, nets.critic_opt, cfg.lr_critic)
    return loss


def actor_objective_and_grads(b: Batch, nets: DdpgNets):
    """Mean critic value of the actor's actions and its (descent) gradients."""
    n = len(b)
    u = nets.actor.forward(b.s)
    q = nets.critic.forward(np.hstack([b.s, u]))[:, 0]
    _, dx = nets.critic.backward(np.full((n, 1), 1.0 / n))
    du = dx[:, b.s.shape[1]:]
    grads, _ = nets.actor.backward(-du)
    return float(q.mean()), grads


def actor_update(batch, nets: DdpgNets, cfg: DdpgConfig) -> float:
    """Ascend the mean critic value through the actor; the critic is untouched."""
    b = _as_batch(batch)
    obj, grads = actor_objective_and_grads(b, nets)
    adam_update_(nets.actor.params(), grads, nets.actor_opt, cfg.lr_actor)
    return obj


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    check_same_shapes(target, online)
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    for t, o in zip(target.params(), online.params()):
        t *= 1.0 - tau
        t += tau * o
    return target


def hard_update(target: Mlp, online: Mlp) -> Mlp:
    check_same_shapes(target, online)
    for t, o in zip(target.params(), online.params()):
        t[...] = o
    return target


def select_action(actor: Mlp, s, noise_sigma: float, rng):
    """Actor output plus Gaussian noise in normalized units, clamped; physical units."""
    u = actor.forward(np.asarray(s, dtype=np.float64))
    if noise_sigma > 0:
        u = u + rng.normal(0.0, noise_sigma, size=u.shape)
    return to_action(np.clip(u, -1.0, 1.0))


# --- checkpoints ---------------------------------------------------------------
# JSON: {"config": {...}, "episode": k, "nets": {name: [[W, b, act], ...]},
#        "adam": {"actor": {"t", "m", "v"}, "critic": {...}}}

def _dump_net(net: Mlp):
    return [[w.tolist(), b.tolist(), act] for w, b, act in net.layers]


def _dump_adam(s: AdamState):
    return {"t": s.t, "m": [m.tolist() for m in s.m], "v": [v.tolist() for v in s.v]}


def _load_adam(d, params):
    s = AdamState(params)
    s.t = int(d["t"])
    s.m = [np.array(m, dtype=np.float64).reshape(p.shape) for m, p in zip(d["m"], params)]
    s.v = [np.array(v, dtype=np.float64).reshape(p.shape) for v, p in zip(d["v"], params)]
    return s


def save_checkpoint(path, nets: DdpgNets, cfg: DdpgConfig, episode: int):
    doc = {"config": asdict(cfg), "episode": episode,
           "nets": {k: _dump_net(getattr(nets, k))
                    for k in ("actor", "critic", "actor_target", "critic_target")},
           "adam": {"actor": _dump_adam(nets.actor_opt), "critic": _dump_adam(nets.critic_opt)}}
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc), encoding="utf-8")
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc.strerror}") from None


def load_checkpoint(path):
    """Returns ``(nets, cfg, episode)``; float64 values round-trip exactly through JSON."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc.strerror}") from None
    cfg = DdpgConfig.from_dict(doc["config"])
    n = {k: Mlp([(w, b, act) for w, b, act in v]) for k, v in doc["nets"].items()}
    nets = DdpgNets(n["actor"], n["critic"])
    nets.actor_target, nets.critic_target = n["actor_target"], n["critic_target"]
    for shape_src, other in ((nets.actor, nets.actor_target), (nets.critic, nets.critic_target)):
        check_same_shapes(shape_src, other)
    nets.actor_opt = _load_adam(doc["adam"]["actor"], nets.actor.params())
    nets.critic_opt = _load_adam(doc["adam"]["critic"], nets.critic.params())
    return nets, cfg, int(doc["episode"])
