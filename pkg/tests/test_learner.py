import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnative.errors import DimensionMismatch, EmptyBatch, InvalidConfig, ShapeMismatch
from dtnative.events import GREEN_RATIO_BOUNDS, SAMPLING_PERIOD_BOUNDS, SPEED_LIMIT_BOUNDS
from dtnative.learner.ddpg import (
    ACTION_HIGH,
    ACTION_LOW,
    Batch,
    DdpgConfig,
    DdpgNets,
    ReplayBuffer,
    Transition,
    actor_objective_and_grads,
    actor_update,
    bellman_target,
    critic_loss_and_grads,
    critic_targets,
    critic_update,
    hard_update,
    load_checkpoint,
    save_checkpoint,
    select_action,
    soft_update,
    to_action,
    to_normalized,
)
from dtnative.learner.env import make_env
from dtnative.learner.mlp import AdamState, Mlp, adam_step
from dtnative.learner.train import LOG_FIELDS, TrainingLog, train
from dtnative.selftest import gradient_checks, numeric_grads, rel_err


def rand_batch(rng, n):
    return Batch(rng.uniform(0, 1, (n, 5)), rng.uniform(ACTION_LOW, ACTION_HIGH, (n, 3)),
                 rng.uniform(-1, 0, n), rng.uniform(0, 1, (n, 5)),
                 (rng.uniform(0, 1, n) < 0.2).astype(float))


def zero_state_batch(n):
    return Batch(np.zeros((n, 5)), np.tile(ACTION_LOW, (n, 1)), np.zeros(n), np.zeros((n, 5)),
                 np.zeros(n))


def fd(f, p):
    """Central-difference gradient of ``f()`` w.r.t. every entry of ``p``."""
    return numeric_grads(f, [p])[0][2].reshape(p.shape)


def small_nets(seed=0, hidden=8):
    return DdpgNets.create(np.random.default_rng(seed), hidden)


# --- mlp -----------------------------------------------------------------------

def test_zero_net_outputs_zero():
    net = Mlp([(np.zeros((4, 3)), np.zeros(4), "relu"), (np.zeros((2, 4)), np.zeros(2), "identity")])
    assert np.array_equal(net([1.0, -2.0, 3.0]), np.zeros(2))


def test_single_linear_layer():
    assert Mlp([([[2.0]], [1.0], "identity")])([3.0]).tolist() == [7.0]


def test_actor_head_in_bounds():
    rng = np.random.default_rng(0)
    nets = DdpgNets.create(rng)
    a = to_action(nets.actor(rng.normal(0, 10, (10_000, 5))))
    assert np.all(a >= ACTION_LOW) and np.all(a <= ACTION_HIGH)
    assert ACTION_LOW.tolist() == [SPEED_LIMIT_BOUNDS[0], GREEN_RATIO_BOUNDS[0],
                                   SAMPLING_PERIOD_BOUNDS[0]]


def test_normalization_roundtrip():
    u = np.array([-1.0, 0.0, 1.0])
    np.testing.assert_allclose(to_normalized(to_action(u)), u, atol=1e-15)
    np.testing.assert_allclose(to_action([-1, -1, -1]), ACTION_LOW)
    np.testing.assert_allclose(to_action([1, 1, 1]), ACTION_HIGH)


def test_dimension_errors():
    net = Mlp([([[1.0, 2.0]], [0.0], "identity")])
    with pytest.raises(DimensionMismatch):
        net([1.0])
    net([1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        net.backward([1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        Mlp([([[1.0, 2.0]], [0.0], "relu"), ([[1.0, 2.0]], [0.0], "relu")])
    with pytest.raises(DimensionMismatch):
        Mlp([([[1.0, 2.0]], [0.0, 1.0], "relu")])


def test_backward_needs_forward():
    with pytest.raises(RuntimeError):
        Mlp([([[1.0]], [0.0], "identity")]).backward([1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 6), min_size=2, max_size=4),
       st.sampled_from(["relu", "tanh", "identity"]))
def test_backward_matches_finite_differences(seed, sizes, act):
    rng = np.random.default_rng(seed)
    net = Mlp.init(sizes, [act] * (len(sizes) - 2) + ["identity"], rng)
    x = rng.normal(size=sizes[0])
    up = rng.normal(size=sizes[-1])

    def f():
        return float(net(x) @ up)

    net(x)
    grads, dx = net.backward(up)
    for p, g in zip(net.params(), grads):
        num = fd(f, p)
        for a, n in zip(g.ravel(), num.ravel()):
            assert rel_err(a, n) <= 1e-4
    xs = x.copy()

    def fx():
        return float(net(xs) @ up)

    num = fd(fx, xs)
    assert all(rel_err(a, n) <= 1e-4 for a, n in zip(dx, num))


def test_zero_upstream_zero_grads():
    net = Mlp.init([3, 4, 2], ["tanh", "identity"], np.random.default_rng(1))
    net(np.ones(3))
    grads, dx = net.backward(np.zeros(2))
    assert all(not g.any() for g in grads) and not dx.any()


def test_dead_relu_blocks_gradient():
    net = Mlp([([[1.0], [-1.0]], [0.0, 0.0], "relu"), ([[1.0, 1.0]], [0.0], "identity")])
    net([2.0])  # second unit has pre-activation -2
    grads, _ = net.backward([1.0])
    assert grads[0].tolist() == [[2.0], [0.0]] and grads[1].tolist() == [1.0, 0.0]


def test_batch_forward_matches_rows():
    net = Mlp.init([3, 5, 2], ["relu", "tanh"], np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(7, 3))
    np.testing.assert_allclose(net(x), np.array([net(r) for r in x]), rtol=1e-13, atol=1e-15)


# --- adam ----------------------------------------------------------------------

def test_adam_zero_grad_first_step():
    p = [np.array([1.0, -2.0])]
    new, st_ = adam_step(p, [np.zeros(2)], AdamState(p), 0.1)
    assert np.array_equal(new[0], p[0]) and st_.t == 1


def test_adam_first_step_closed_form():
    p = [np.array([0.5, 0.5, 0.5])]
    g = np.array([0.3, -2.0, 1e-3])
    new, _ = adam_step(p, [g], AdamState(p), 0.01)
    np.testing.assert_allclose(new[0], p[0] - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-12)


def test_adam_second_identical_step_not_larger():
    p = [np.array([0.0])]
    g = [np.array([0.7])]
    p1, s1 = adam_step(p, g, AdamState(p), 0.05)
    p2, _ = adam_step(p1, g, s1, 0.05)
    # constant g: both bias-corrected moments equal g and g*g, so the steps match
    assert abs(p2[0][0] - p1[0][0]) <= abs(p1[0][0] - p[0][0]) + 1e-15


def test_adam_is_pure_and_checks_shapes():
    p = [np.array([1.0])]
    s = AdamState(p)
    adam_step(p, [np.array([1.0])], s, 0.1)
    assert p[0][0] == 1.0 and s.t == 0
    with pytest.raises(ShapeMismatch):
        adam_step(p, [np.array([1.0, 2.0])], s, 0.1)


# --- bellman, critic, actor ----------------------------------------------------

def test_bellman_examples():
    assert bellman_target(0.3, 0.0, 5.0, False) == 0.3
    assert bellman_target(1.0, 0.8, 2.0, False) == pytest.approx(2.6)
    assert bellman_target(-0.4, 0.8, 123.0, True) == -0.4


def _scalar_forward(layers, x):
    h = list(x)
    for w, b, act in layers:
        out = []
        for j in range(len(b)):
            z = b[j]
            for k in range(len(h)):
                z += w[j][k] * h[k]
            out.append(max(z, 0.0) if act == "relu" else math.tanh(z) if act == "tanh" else z)
        h = out
    return h


def _scalar_loss(nets, b, gamma):
    dump = lambda net: [(w.tolist(), b_.tolist(), a) for w, b_, a in net.layers]
    A, C, At, Ct = (dump(n) for n in (nets.actor, nets.critic, nets.actor_target,
                                      nets.critic_target))
    lo, hi = ACTION_LOW.tolist(), ACTION_HIGH.tolist()
    total = 0.0
    for i in range(len(b)):
        s, sn = b.s[i].tolist(), b.s_next[i].tolist()
        un = _scalar_forward(At, sn)
        qn = _scalar_forward(Ct, sn + un)[0]
        y = b.r[i] + (0.0 if b.done[i] else gamma * qn)
        u = [2 * (b.a[i][k] - lo[k]) / (hi[k] - lo[k]) - 1 for k in range(3)]
        q = _scalar_forward(C, s + u)[0]
        total += (y - q) ** 2
    return total / len(b)


@pytest.mark.parametrize("seed", range(5))
def test_critic_loss_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    nets = DdpgNets.create(rng, hidden=16)
    # make targets differ from online nets
    for p in nets.critic_target.params() + nets.actor_target.params():
        p += rng.normal(0, 0.05, p.shape)
    b = rand_batch(rng, 32)
    expect = _scalar_loss(nets, b, 0.8)
    got = critic_update(b, nets, DdpgConfig(batch=32))
    assert abs(got - expect) <= 1e-12


def test_critic_perfect_fit_zero_loss():
    nets = small_nets()
    rng = np.random.default_rng(0)
    b = rand_batch(rng, 16)
    y = critic_targets(b, nets, 0.8)
    x = np.hstack([b.s, to_normalized(b.a)])
    q = nets.critic(x)[:, 0]
    loss, grads = critic_loss_and_grads(b, nets, q)
    assert loss == 0.0 and all(not g.any() for g in grads)
    assert np.isfinite(y).all()


def test_critic_single_transition_unit_loss():
    nets = small_nets()
    for p in nets.critic.params():
        p[...] = 0.0
    for p in nets.critic_target.params():
        p[...] = 0.0
    t = Transition(np.zeros(5), ACTION_LOW.copy(), 1.0, np.zeros(5), True)
    assert critic_update([t], nets, DdpgConfig(batch=1)) == 1.0


def test_critic_update_leaves_targets_and_actor():
    nets = small_nets()
    before = [p.copy() for p in nets.critic_target.params() + nets.actor.params()]
    critic_update(rand_batch(np.random.default_rng(1), 8), nets, DdpgConfig(batch=8))
    after = nets.critic_target.params() + nets.actor.params()
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        critic_update([], small_nets(), DdpgConfig())
    with pytest.raises(EmptyBatch):
        actor_update([], small_nets(), DdpgConfig())
    with pytest.raises(EmptyBatch):
        ReplayBuffer(10).sample(1, np.random.default_rng(0))


def test_constant_critic_leaves_actor():
    nets = small_nets()
    for w, b, _ in nets.critic.layers:
        w[...] = 0.0
    nets.critic.layers[-1][1][0] = 3.0
    before = [p.copy() for p in nets.actor.params()]
    actor_update(rand_batch(np.random.default_rng(0), 8), nets, DdpgConfig(batch=8))
    assert all(np.array_equal(a, b) for a, b in zip(before, nets.actor.params()))


class QuadCritic:
    """Q(s, u) = -(u0 - 0.5)^2 with the Mlp forward/backward interface."""

    def forward(self, x):
        self.x = np.asarray(x)
        return -((self.x[:, 5] - 0.5) ** 2)[:, None]

    def backward(self, up):
        dx = np.zeros_like(self.x)
        dx[:, 5] = -2.0 * (self.x[:, 5] - 0.5) * up[:, 0]
        return [], dx


def test_actor_moves_toward_quadratic_optimum():
    actor = Mlp([(np.zeros((3, 5)), np.array([math.atanh(0.2), 0.0, 0.0]), "tanh")])
    nets = SimpleNamespace(actor=actor, critic=QuadCritic(), actor_opt=AdamState(actor.params()))
    s = np.zeros(5)
    assert actor(s)[0] == pytest.approx(0.2)
    actor_update(zero_state_batch(4),
                 nets, DdpgConfig(batch=4))
    assert 0.2 < actor(s)[0] < 0.5


def test_actor_update_leaves_critic():
    nets = small_nets()
    before = [p.copy() for p in nets.critic.params()]
    actor_update(rand_batch(np.random.default_rng(0), 8), nets, DdpgConfig(batch=8))
    assert all(np.array_equal(a, b) for a, b in zip(before, nets.critic.params()))


def test_gradient_oracle_quick():
    assert gradient_checks(10, seed=11) == []


def test_actor_objective_gradient_small():
    rng = np.random.default_rng(5)
    nets = DdpgNets.create(rng, hidden=6)
    b = rand_batch(rng, 5)
    _, grads = actor_objective_and_grads(b, nets)

    def f():
        return -actor_objective_and_grads(b, nets)[0]

    for p, g in zip(nets.actor.params(), grads):
        num = fd(f, p)
        assert all(rel_err(a, n) <= 1e-4 for a, n in zip(g.ravel(), num.ravel()))


# --- target networks -----------------------------------------------------------

def test_soft_update_examples():
    online = Mlp([(np.full((1, 1), 2.0), np.array([2.0]), "identity")])
    t = Mlp([(np.zeros((1, 1)), np.zeros(1), "identity")])
    soft_update(t, online, 0.5)
    assert t.layers[0][0][0, 0] == 1.0 and t.layers[0][1][0] == 1.0
    soft_update(t, online, 0.0)
    assert t.layers[0][0][0, 0] == 1.0
    soft_update(t, online, 1.0)
    assert t.layers[0][0][0, 0] == 2.0


def test_soft_update_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        soft_update(small_nets(hidden=4).actor, small_nets(hidden=5).actor, 0.1)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_soft_update_contracts(seed, tau):
    rng = np.random.default_rng(seed)
    a, b = DdpgNets.create(rng, 4), DdpgNets.create(rng, 4)
    t, o = a.actor, b.actor
    before = max(np.max(np.abs(x - y)) for x, y in zip(t.params(), o.params()))
    soft_update(t, o, tau)
    after = max(np.max(np.abs(x - y)) for x, y in zip(t.params(), o.params()))
    assert after <= before


def test_targets_start_as_copies():
    nets = small_nets()
    for a, b in ((nets.actor, nets.actor_target), (nets.critic, nets.critic_target)):
        assert all(np.array_equal(x, y) and x is not y for x, y in zip(a.params(), b.params()))
    hard_update(nets.actor_target, small_nets(seed=3).actor)
    assert not np.array_equal(nets.actor_target.params()[0], nets.actor.params()[0])


# --- exploration and replay ----------------------------------------------------

def test_select_action_examples():
    nets = small_nets()
    s = np.full(5, 0.3)
    det = select_action(nets.actor, s, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(det, to_action(nets.actor(s)))
    rng = np.random.default_rng(1)
    draws = np.array([select_action(nets.actor, s, 5.0, rng) for _ in range(10_000)])
    assert np.all(draws >= ACTION_LOW) and np.all(draws <= ACTION_HIGH)
    seq = lambda: [select_action(nets.actor, s, 0.1, np.random.default_rng(7)).tolist()
                   for _ in range(3)]
    assert seq() == seq()


def test_replay_uniformity():
    buf = ReplayBuffer(10)
    for k in range(10):
        buf.push(Transition(np.full(5, k), np.zeros(3), float(k), np.zeros(5), False))
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    draws = 100_000
    for _ in range(draws // 5):
        idx = buf.sample_indices(5, rng)
        assert len(set(idx.tolist())) == 5
        counts[idx] += 1
    p = 0.1
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(3)
    for k in range(5):
        buf.push(Transition(np.zeros(5), np.zeros(3), float(k), np.zeros(5), False))
    assert len(buf) == 3 and sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]


# --- config --------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(lr_actor=0.5), dict(lr_critic=0.0005), dict(gamma=1.0),
                                dict(batch=0), dict(tau=1.5), dict(noise_sigma=-1)])
def test_config_rejects(kw):
    with pytest.raises(InvalidConfig):
        DdpgConfig(**kw).validate()


def test_config_from_dict():
    assert DdpgConfig.from_dict({"lr_actor": 0.01}).lr_actor == 0.01
    with pytest.raises(InvalidConfig):
        DdpgConfig.from_dict({"learning_rate": 0.01})


# --- training ------------------------------------------------------------------

class LineEnv:
    """Deterministic toy environment: reward peaks when the speed action is mid-range."""

    def __init__(self):
        self.applied = []

    def reset(self):
        self.s = np.full(5, 0.5)
        return self.s.copy()

    def step(self, a):
        self.applied.append(np.array(a))
        u = to_normalized(a)
        self.s = np.clip(0.9 * self.s + 0.1 * np.r_[u, u[:2]] ** 2, 0, 1)
        return self.s.copy(), float(-(u[0] ** 2)), {}


FAST = DdpgConfig(batch=16, episodes=6, steps_per_episode=10, hidden=8, seed=3)


def test_warmup_gate():
    log = train(LineEnv(), DdpgConfig(batch=16, episodes=1, steps_per_episode=15, hidden=8))
    assert log.updates == 0 and math.isnan(log.rows[0]["mean_critic_loss"])
    log = train(LineEnv(), DdpgConfig(batch=16, episodes=2, steps_per_episode=10, hidden=8))
    assert log.updates == 5


def test_training_is_deterministic():
    a, b = train(LineEnv(), FAST), train(LineEnv(), FAST)
    assert a.rows == b.rows
    assert all(np.array_equal(x, y) for x, y in zip(a.nets.actor.params(), b.nets.actor.params()))


def test_log_rows_and_csv(tmp_path):
    env = LineEnv()
    log = train(env, FAST)
    assert [r["episode"] for r in log.rows] == list(range(1, 7))
    assert all(np.all(a >= ACTION_LOW) and np.all(a <= ACTION_HIGH) for a in env.applied)
    log.write_csv(tmp_path / "log.csv", extra={"combo": "x"})
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "combo," + ",".join(LOG_FIELDS) and len(lines) == 7
    assert TrainingLog(rows=log.rows).final_mean_loss(3) == pytest.approx(
        np.mean([r["mean_critic_loss"] for r in log.rows[-3:]]))


def test_hard_update_mode():
    cfg = DdpgConfig(batch=8, episodes=1, steps_per_episode=11, hidden=4, hard_update_every=2)
    log = train(LineEnv(), cfg)
    n = log.nets
    assert log.updates == 4
    assert all(np.array_equal(a, b) for a, b in zip(n.actor.params(), n.actor_target.params()))


def test_checkpoint_roundtrip(tmp_path):
    saved = []

    def ckpt(nets, ep):
        save_checkpoint(tmp_path / "ck.json", nets, FAST, ep)
        saved.append(ep)

    log = train(LineEnv(), FAST, checkpoint=ckpt)
    nets, cfg, ep = load_checkpoint(tmp_path / "ck.json")
    assert saved == list(range(1, 7)) and ep == 6 and cfg == FAST
    for name in ("actor", "critic", "actor_target", "critic_target"):
        for a, b in zip(getattr(nets, name).params(), getattr(log.nets, name).params()):
            assert np.array_equal(a, b)
    assert nets.critic_opt.t == log.nets.critic_opt.t
    assert all(np.array_equal(a, b) for a, b in zip(nets.critic_opt.v, log.nets.critic_opt.v))


def test_twin_env_step():
    env = make_env(sensors=5, seed=1)
    s = env.reset()
    assert s.shape == (5,) and np.all((s >= 0) & (s <= 1))
    s2, r, info = env.step(np.array([8.0, 0.5, 10.0]))
    assert np.all((s2 >= 0) & (s2 <= 1)) and -1.1 <= r <= 0
    assert env.world.speed_limit("E0_0") == 8.0
    assert env.world.lights["TL_0_0"].green_duration == 30.0
    assert env.world.sensors["S000"].sampling_period == 10.0
    assert r == pytest.approx(-info["congestion"] - 0.1 * info["overflow"] / 64)


def test_twin_env_training_actions_in_bounds():
    env = make_env(sensors=5, seed=0)
    train(env, DdpgConfig(batch=16, episodes=2, steps_per_episode=20, hidden=8))
    assert len(env.applied) == 40
    assert all(np.all(a >= ACTION_LOW) and np.all(a <= ACTION_HIGH) for a in env.applied)
