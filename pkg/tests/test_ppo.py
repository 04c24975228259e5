import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlprng.envs import BFConfig, OneStepEnv, RFConfig, make_env
from rlprng.neural import BFNetworks, RFNetwork, RecurrentState
from rlprng.ppo import (
    PPO, Episode, PPOConfig, RolloutBuffer, clip_loss_grad, collect_episodes, compute_gae, gae,
    kl_estimate, kl_exceeded, normalize_advantages, ppo_clip_objective, value_loss,
)


def test_config_defaults_and_validation():
    cfg = PPOConfig()
    assert (cfg.clip_ratio, cfg.kl_threshold, cfg.gae_lambda, cfg.gamma) == (0.2, 0.015, 0.95, 1.0)
    assert (cfg.minibatch, cfg.lr_policy, cfg.lr_value) == (32, 3e-4, 1e-3)
    with pytest.raises(ValueError):
        PPOConfig(clip_ratio=1.0)
    with pytest.raises(ValueError):
        PPOConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PPOConfig(lr_policy=0)


# --- GAE -------------------------------------------------------------------

def test_gae_examples():
    adv, ret = gae([1.0], [0.2], 1.0, 0.95)
    assert adv[0] == pytest.approx(0.8) and ret[0] == 1.0
    adv, ret = gae([0.0, 1.0], [0.2, 0.3], 1.0, 0.95)
    assert adv == pytest.approx([0.765, 0.7]) and ret.tolist() == [1.0, 1.0]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.data(), st.floats(0, 1))
def test_gae_lambda_zero_is_td(rewards, data, gamma):
    values = np.array(data.draw(st.lists(st.floats(-2, 2), min_size=len(rewards), max_size=len(rewards))))
    adv, _ = gae(rewards, values, gamma, 0.0)
    nxt = np.append(values[1:], 0.0)
    assert np.allclose(adv, np.array(rewards) + gamma * nxt - values, atol=1e-12)


@given(st.integers(1, 40), st.floats(0, 1), st.lists(st.floats(-1, 1), min_size=40, max_size=40))
def test_gae_lambda_one_gamma_one_is_return_minus_value(T, r, values):
    rewards = np.zeros(T)
    rewards[-1] = r
    v = np.array(values[:T])
    adv, ret = gae(rewards, v, 1.0, 1.0)
    assert np.allclose(ret, r) and np.allclose(adv, r - v, atol=1e-12)


def test_compute_gae_rejects_incomplete():
    ep = Episode(np.zeros((2, 1)), np.zeros(2, int), np.zeros(2), np.zeros(2), np.zeros(2), np.array([False, False]))
    with pytest.raises(ValueError):
        compute_gae(ep)


def test_normalize_advantages():
    assert normalize_advantages([1, 2, 3]) == pytest.approx([-math.sqrt(1.5), 0, math.sqrt(1.5)])
    assert np.all(normalize_advantages([2.0, 2.0, 2.0]) == 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_normalized_moments(xs):
    xs = np.array(xs)
    if xs.std() < 1e-3:
        return
    out = normalize_advantages(xs)
    assert abs(out.mean()) < 1e-9 and abs(out.std() - 1) < 1e-9


# --- losses ----------------------------------------------------------------

def test_clip_objective_examples():
    assert ppo_clip_objective([math.log(1.3)], [0.0], [1.0]) == pytest.approx(1.2)
    assert ppo_clip_objective([-0.4], [-0.4], [-2.5]) == pytest.approx(-2.5)
    assert ppo_clip_objective([math.log(0.5)], [0.0], [-1.0]) == pytest.approx(-0.8)


@given(st.lists(st.tuples(st.floats(-3, 0), st.floats(-0.6, 0.6), st.floats(-3, 3)), min_size=1, max_size=40))
def test_clip_loss_grad_finite_difference(rows):
    old = np.array([r[0] for r in rows])
    new = old + np.array([r[1] for r in rows])
    adv = np.array([r[2] for r in rows])
    loss, g = clip_loss_grad(new, old, adv, 0.2)
    assert loss == pytest.approx(-ppo_clip_objective(new, old, adv, 0.2))
    h = 1e-7
    for i in range(new.size):
        ratio = math.exp(new[i] - old[i])
        if min(abs(ratio - 0.8), abs(ratio - 1.2)) < 1e-5:
            continue
        e = np.zeros_like(new)
        e[i] = h
        num = (-ppo_clip_objective(new + e, old, adv) + ppo_clip_objective(new - e, old, adv)) / (2 * h)
        assert g[i] == pytest.approx(num, abs=1e-6)


def test_value_loss():
    assert value_loss([0.3, 0.4], [0.3, 0.4]) == 0
    assert value_loss([0.0], [1.0]) == 1
    assert value_loss([0.0, 0.0], [2.0, -2.0]) == 4 * value_loss([0.0, 0.0], [1.0, -1.0])


def test_kl_estimate_exact_enumeration():
    # actions drawn from p in exact proportion: the sampled estimator equals KL(p || q)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    q = np.array([0.25, 0.25, 0.3, 0.2])
    actions = np.repeat(np.arange(4), [1, 2, 3, 4])
    exact = float(np.sum(p * np.log(p / q)))
    assert kl_estimate(np.log(p[actions]), np.log(q[actions])) == pytest.approx(exact, abs=1e-15)
    assert kl_estimate(np.log(p[actions]), np.log(p[actions])) == 0.0


def test_kl_threshold():
    assert kl_exceeded(0.0151, 0.015) and not kl_exceeded(0.015, 0.015) and not kl_exceeded(0.01, 0.015)


# --- buffer and collection -------------------------------------------------

def small_rf(seed=0, N=2):
    return RFNetwork(N, hidden=6, head=(8,), rng=np.random.default_rng(seed))


def small_bf(seed=0, B=4):
    return BFNetworks(B, hidden=(8, 8), rng=np.random.default_rng(seed))


def test_buffer_rules():
    eps = collect_episodes(lambda: make_env(BFConfig(3, 4)), small_bf(B=3), 3, np.random.default_rng(0))
    buf = RolloutBuffer(2)
    buf.extend(eps[:2])
    assert buf.full and buf.n_transitions == 8
    with pytest.raises(OverflowError):
        buf.add(eps[2])
    bad = Episode(eps[0].observations, eps[0].actions, eps[0].log_probs, eps[0].values, eps[0].rewards,
                  np.zeros(4, bool))
    with pytest.raises(ValueError):
        RolloutBuffer(3).add(bad)
    with pytest.raises(ValueError):
        PPO(small_bf(B=3)).train_epoch(RolloutBuffer(5), np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["rf", "bf", "wanderer"])
def test_collection_invariants(kind):
    if kind == "rf":
        net, cfg = small_rf(N=3), RFConfig(3, 7)
    else:
        net, cfg = small_bf(B=5), BFConfig(5, 7, wanderer=kind == "wanderer")
    eps = collect_episodes(lambda: make_env(cfg), net, 6, np.random.default_rng(1))
    for e in eps:
        assert len(e) == 7 and e.dones[-1] and not e.dones[:-1].any()
        assert np.all(e.log_probs <= 0) and np.all((e.rewards >= 0) & (e.rewards <= 1))
        assert (e.snap_h is not None) == (kind == "rf")
        if kind == "wanderer":
            assert np.all(e.masks.sum(axis=1) == 5)
        _, ret = compute_gae(e)
        assert np.allclose(ret, e.rewards[-1])  # gamma=1, terminal-only reward
        if kind == "rf":
            assert np.all(e.snap_h[0] == 0) and np.all(e.snap_c[0] == 0)
        for t, tr in enumerate(e.transitions()):
            if kind == "rf":
                st_ = RecurrentState(tr.snapshot.h[:, None], tr.snapshot.c[:, None])
                logp, _, _, _ = net.step(tr.observation[None], st_)
            else:
                logp, _, _, _ = net.step(tr.observation[None], None, None if tr.mask is None else tr.mask[None])
            assert logp[0, tr.action] == pytest.approx(tr.log_prob, abs=1e-12)


def test_collection_deterministic():
    f = lambda: make_env(RFConfig(2, 5))
    a = collect_episodes(f, small_rf(), 4, np.random.default_rng(9))
    b = collect_episodes(f, small_rf(), 4, np.random.default_rng(9))
    assert all(np.array_equal(x.actions, y.actions) and x.final == y.final for x, y in zip(a, b))


def test_snapshot_matches_replay():
    net = small_rf(N=3)
    eps = collect_episodes(lambda: make_env(RFConfig(3, 9)), net, 3, np.random.default_rng(2))
    trainer = PPO(net)
    data = trainer._batch(eps)
    rng = np.random.default_rng(0)
    idx = rng.choice(data["act"].size, 12, replace=False)
    logp_snap, v_snap, _ = trainer.evaluate_minibatch(data, idx)
    for j, i in enumerate(idx):
        e, t = divmod(int(i), 9)
        obs = eps[e].observations[: t + 1][:, None, :]
        logp, v, _, _ = net.forward_sequence(obs, net.initial_state(1))
        assert np.allclose(logp[-1, 0], logp_snap[j], atol=1e-9)
        assert v[-1, 0] == pytest.approx(v_snap[j], abs=1e-9)


def test_clip_gradient_equals_vanilla_pg_at_ratio_one():
    net = small_bf(B=3)
    eps = collect_episodes(lambda: make_env(BFConfig(3, 4)), net, 8, np.random.default_rng(3))
    trainer = PPO(net)
    data = trainer._batch(eps)
    idx = np.arange(32)
    logp_all, _, tape = trainer.evaluate_minibatch(data, idx)
    act = data["act"][idx]
    logp = logp_all[np.arange(32), act]
    assert np.allclose(logp, data["logp"][idx], atol=1e-12)
    _, dsel = clip_loss_grad(logp, data["logp"][idx], data["adv"][idx], 0.2)
    assert np.allclose(dsel, -data["adv"][idx] / 32)
    d = np.zeros_like(logp_all)
    d[np.arange(32), act] = dsel
    g_clip = net.backward(tape, d, None)
    # vanilla estimator: -mean(A * grad log pi), accumulated one sample at a time
    g_pg = {k: np.zeros_like(v) for k, v in net.params.items()}
    for j in range(32):
        lp, _, _, tp = net.step(data["obs"][idx[j]][None])
        dj = np.zeros_like(lp)
        dj[0, act[j]] = -data["adv"][idx[j]] / 32
        for k, v in net.backward(tp, dj, None).items():
            g_pg[k] += v
    for k in net.policy_keys:
        assert np.allclose(g_clip[k], g_pg[k], atol=1e-12)


# --- training epochs -------------------------------------------------------

def fill(net, cfg, n, seed):
    buf = RolloutBuffer(n)
    buf.extend(collect_episodes(lambda: make_env(cfg), net, n, np.random.default_rng(seed)))
    return buf


def test_minibatch_count_and_remainder():
    net = small_bf(B=5)
    buf = fill(net, BFConfig(5, 10), 5, 0)  # 50 transitions -> 1 full + remainder 18
    stats = PPO(net).train_epoch(buf, np.random.default_rng(0))
    assert stats.n_minibatches == 2 and stats.remainder == 18
    assert buf.episodes == []


def test_full_bf_buffer_minibatch_count():
    # 500 episodes of 100 steps -> 1562 full minibatches plus a remainder of 16
    assert 500 * 100 // 32 == 1562 and 500 * 100 % 32 == 16


def test_threshold_zero_stops_policy_after_first_step():
    net = small_rf()
    buf = fill(net, RFConfig(2, 20), 8, 1)
    trainer = PPO(net, PPOConfig(kl_threshold=0.0))
    pol = {k: net.params[k] for k in trainer.net.policy_keys}
    snaps = []
    trainer.on_policy_step = lambda step: snaps.append({k: v.copy() for k, v in pol.items()})
    before_value = {k: net.params[k].copy() for k in net.value_keys}
    stats = trainer.train_epoch(buf, np.random.default_rng(0))
    assert stats.policy_updates == 1 and stats.early_stop_step == 1
    assert stats.n_minibatches == 5
    assert all(np.array_equal(snaps[0][k], net.params[k]) for k in pol)
    assert any(not np.array_equal(before_value[k], net.params[k]) for k in net.value_keys)
    assert trainer.value_opt.t == 5 and trainer.policy_opt.t == 1


def test_early_stop_freezes_policy_bit_exactly():
    net = small_bf(B=4)
    buf = fill(net, BFConfig(4, 16), 40, 2)
    trainer = PPO(net, PPOConfig(kl_threshold=1e-4, lr_policy=1e-2))
    snaps = []
    trainer.on_policy_step = lambda step: snaps.append({k: net.params[k].copy() for k in net.policy_keys})
    stats = trainer.train_epoch(buf, np.random.default_rng(0))
    assert stats.early_stop_step is not None and stats.policy_updates < stats.n_minibatches
    assert all(np.array_equal(snaps[-1][k], net.params[k]) for k in net.policy_keys)
    assert math.isfinite(stats.mean_kl)


def test_toy_bandit_converges():
    rng = np.random.default_rng(0)
    net = BFNetworks(1, n_actions=2, rng=rng)
    trainer = PPO(net)
    for _ in range(50):
        buf = RolloutBuffer(64)
        buf.extend(collect_episodes(OneStepEnv, net, 64, rng))
        trainer.train_epoch(buf, rng)
    assert net.forward(np.array([1.0]))[0][0] > 0.9
