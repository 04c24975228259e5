import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check, check_network, randomize
from rlprng.neural import (
    Adam, BFNetworks, RFNetwork, RecurrentState, clip_grad_norm, dense_forward, load_checkpoint,
    log_softmax, lstm_init, lstm_step, lstm_step_backward, mlp_backward, mlp_forward, mlp_init,
    network_from_checkpoint, save_checkpoint, softmax, xavier_init,
)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


# --- initialisation and activations ----------------------------------------

def test_xavier_bounds():
    rng = np.random.default_rng(0)
    assert np.abs(xavier_init(3, 3, rng)).max() <= 1.0
    W = xavier_init(256, 128, rng)
    assert W.shape == (128, 256)
    assert np.abs(W).max() <= math.sqrt(6 / 384)
    assert np.abs(W).max() > 0.95 * math.sqrt(6 / 384)
    assert abs(xavier_init(100, 100, rng).mean()) < 0.02


def test_dense_and_softmax():
    assert dense_forward(np.eye(2), np.zeros(2), np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert np.allclose(dense_forward(np.eye(3), np.zeros(3), np.full(3, 4.0), "softmax"), 1 / 3)
    p = softmax(np.random.default_rng(0).normal(size=(5, 9)) * 30)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        dense_forward(np.eye(2), np.zeros(2), np.ones(3))


def test_masked_softmax():
    logits = np.array([1.0, 2.0, 3.0, 4.0])
    mask = np.array([True, False, True, False])
    p = softmax(logits, mask)
    assert p[1] == 0.0 and p[3] == 0.0
    assert p[2] / p[0] == pytest.approx(math.e**2)
    with pytest.raises(ValueError):
        log_softmax(logits, np.zeros(4, bool))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.data())
def test_mask_preserves_ratios(logits, data):
    logits = np.array(logits)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(logits), max_size=len(logits))))
    if not mask.any():
        mask[0] = True
    full, masked = log_softmax(logits), log_softmax(logits, mask)
    allowed = np.flatnonzero(mask)
    assert np.allclose(masked[allowed] - masked[allowed[0]], full[allowed] - full[allowed[0]], atol=1e-9)
    assert np.exp(masked).sum() == pytest.approx(1.0, abs=1e-9)


# --- LSTM --------------------------------------------------------------------

def test_lstm_forget_bias_and_zero_weights():
    params = lstm_init("l", 3, 4, np.random.default_rng(0))
    assert np.all(params["l.b"][4:8] == 1.0)
    assert np.all(params["l.b"][:4] == 0.0) and np.all(params["l.b"][8:] == 0.0)
    Wx, Wh = np.zeros((16, 3)), np.zeros((16, 4))
    b = np.zeros(16)
    b[4:8] = 1.0
    h, c, cache = lstm_step(Wx, Wh, b, np.ones((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)))
    assert np.allclose(cache[4], sig(1.0)) and np.all(h == 0) and np.all(c == 0)
    h, c, _ = lstm_step(Wx, Wh, np.zeros(16), np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)))
    assert np.all(h == 0) and np.all(c == 0)


def scalar_lstm(Wx, Wh, b, x, h, c):
    H = len(h)
    h_new, c_new = [0.0] * H, [0.0] * H
    for u in range(H):
        z = [b[g * H + u] + sum(Wx[g * H + u][j] * x[j] for j in range(len(x)))
             + sum(Wh[g * H + u][j] * h[j] for j in range(H)) for g in range(4)]
        i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
        c_new[u] = f * c[u] + i * g
        h_new[u] = o * math.tanh(c_new[u])
    return h_new, c_new


def test_lstm_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    p = lstm_init("l", 3, 4, rng)
    randomize(p, rng)
    x, h, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
    h1, c1, _ = lstm_step(p["l.Wx"], p["l.Wh"], p["l.b"], x[None], h[None], c[None])
    hw, cw = scalar_lstm(p["l.Wx"].tolist(), p["l.Wh"].tolist(), p["l.b"].tolist(), x.tolist(), h.tolist(), c.tolist())
    assert np.allclose(h1[0], hw, atol=1e-13) and np.allclose(c1[0], cw, atol=1e-13)


# --- architectures against layer-by-layer evaluation -----------------------

def head_oracle(params, prefix, x):
    a = list(x)
    i = 0
    while f"{prefix}{i}.W" in params:
        W, b = params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"]
        z = [b[r] + sum(W[r][j] * a[j] for j in range(len(a))) for r in range(len(b))]
        i += 1
        a = [max(0.0, v) for v in z] if f"{prefix}{i}.W" in params else z
    return a


def test_rf_forward_composition():
    rng = np.random.default_rng(2)
    net = RFNetwork(2, hidden=8, head=(6, 5), rng=rng)
    randomize(net.params, rng)
    state = RecurrentState(rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 1, 8)))
    obs = np.array([1.0, 0.0])
    probs, value, new = net.forward(obs, state.copy())
    p = {k: v.tolist() for k, v in net.params.items()}
    x = obs.tolist()
    for layer in range(2):
        h, c = scalar_lstm(p[f"lstm{layer}.Wx"], p[f"lstm{layer}.Wh"], p[f"lstm{layer}.b"], x,
                           state.h[layer, 0].tolist(), state.c[layer, 0].tolist())
        assert np.allclose(new.h[layer, 0], h, atol=1e-12) and np.allclose(new.c[layer, 0], c, atol=1e-12)
        x = h
    logits = head_oracle(p, "pi", x)
    ex = [math.exp(v - max(logits)) for v in logits]
    assert np.allclose(probs, [e / sum(ex) for e in ex], atol=1e-12)
    assert value == pytest.approx(head_oracle(p, "v", x)[0], abs=1e-12)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    again = net.forward(obs, state.copy())
    assert np.array_equal(again[0], probs) and again[1] == value


def test_bf_forward_composition_and_mask():
    rng = np.random.default_rng(3)
    net = BFNetworks(2, hidden=(5, 7, 3), rng=rng)
    randomize(net.params, rng)
    obs = np.array([1.0, 0.0])
    probs, value = net.forward(obs)
    p = {k: v.tolist() for k, v in net.params.items()}
    logits = head_oracle(p, "pi", obs.tolist())
    ex = [math.exp(v - max(logits)) for v in logits]
    assert np.allclose(probs, [e / sum(ex) for e in ex], atol=1e-12)
    assert value == pytest.approx(head_oracle(p, "v", obs.tolist())[0], abs=1e-12)
    mask = np.array([False, True, True, False])
    mp, _ = net.forward(obs, mask)
    assert np.count_nonzero(mp) == 2 and mp.sum() == pytest.approx(1.0)


def test_default_architecture_shapes():
    rf = RFNetwork(3, rng=np.random.default_rng(0))
    assert rf.params["lstm0.Wx"].shape == (512, 3) and rf.params["lstm1.Wh"].shape == (512, 128)
    assert [rf.params[f"pi{i}.W"].shape[0] for i in range(4)] == [256, 128, 64, 8]
    assert rf.params["v3.W"].shape == (1, 64)
    for layer in range(2):
        assert np.all(rf.params[f"lstm{layer}.b"][128:256] == 1.0)
    assert not set(rf.policy_keys) & set(rf.value_keys)
    bf = BFNetworks(5, rng=np.random.default_rng(0))
    assert [bf.params[f"pi{i}.W"].shape[0] for i in range(4)] == [256, 512, 256, 10]
    assert [bf.params[f"v{i}.W"].shape[0] for i in range(4)] == [256, 512, 256, 1]
    assert not set(bf.policy_group) & set(bf.value_group)


# --- gradients ---------------------------------------------------------------

def test_linear_dense_gradient():
    params = mlp_init("d", (3, 2), np.random.default_rng(0))
    x = np.array([[1.0, -2.0, 0.5]])
    _, cache = mlp_forward(params, "d", x)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    mlp_backward(params, "d", cache, np.ones((1, 2)), grads)
    assert np.array_equal(grads["d0.W"], np.outer(np.ones(2), x[0]))


def test_zero_output_gradient():
    rng = np.random.default_rng(0)
    net = RFNetwork(2, hidden=4, head=(5,), rng=rng)
    logp, v, _, tape = net.forward_sequence(np.ones((3, 2, 2)), net.initial_state(2))
    grads = net.backward(tape, np.zeros_like(logp), np.zeros_like(v))
    assert all(not g.any() for g in grads.values())


@pytest.mark.parametrize("seed", range(3))
def test_dense_gradcheck(seed):
    rng = np.random.default_rng(seed)
    params = mlp_init("d", (5, 7, 6, 3), rng)
    randomize(params, rng)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))

    def f():
        out, (_, pre) = mlp_forward(params, "d", x)
        return float(np.sum(out * w)), np.concatenate([(z > 0).ravel() for z in pre[:-1]])

    _, cache = mlp_forward(params, "d", x)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    mlp_backward(params, "d", cache, w, grads)
    res = check(params, f, grads, rng)
    assert res.max_rel_err < 1e-4 and res.skipped_kinks <= 0.05 * res.checked


@pytest.mark.parametrize("seed", range(3))
def test_lstm_gradcheck_three_steps(seed):
    rng = np.random.default_rng(seed)
    p = lstm_init("l", 3, 4, rng)
    randomize(p, rng)
    xs = rng.normal(size=(3, 2, 3))
    h0, c0 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    wh, wc = rng.normal(size=(3, 2, 4)), rng.normal(size=(2, 4))

    def run():
        h, c, caches, loss = h0, c0, [], 0.0
        for t in range(3):
            h, c, cache = lstm_step(p["l.Wx"], p["l.Wh"], p["l.b"], xs[t], h, c)
            caches.append(cache)
            loss += float(np.sum(h * wh[t]))
        return loss + float(np.sum(c * wc)), caches

    _, caches = run()
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh, dc = np.zeros((2, 4)), wc.copy()
    for t in reversed(range(3)):
        dWx, dWh, db, _, dh, dc = lstm_step_backward(p["l.Wx"], p["l.Wh"], caches[t], dh + wh[t], dc)
        grads["l.Wx"] += dWx
        grads["l.Wh"] += dWh
        grads["l.b"] += db
    res = check(p, lambda: (run()[0], np.zeros(0)), grads, rng)
    assert res.max_rel_err < 1e-4 and res.checked == sum(v.size for v in p.values())


def test_rf_small_full_gradcheck():
    rng = np.random.default_rng(11)
    res = check_network(RFNetwork(2, hidden=4, head=(6, 5), rng=rng), rng, T=3, per_tensor=None)
    assert res.max_rel_err < 1e-4 and res.skipped_kinks <= 0.05 * res.checked


def test_bf_masked_gradcheck():
    rng = np.random.default_rng(12)
    mask = rng.random((3, 8)) < 0.5
    mask[:, 0] = True
    res = check_network(BFNetworks(4, hidden=(6, 7, 5), rng=rng), rng, mask=mask, per_tensor=None)
    assert res.max_rel_err < 1e-4 and res.skipped_kinks <= 0.05 * res.checked


# --- optimiser and checkpoints -----------------------------------------------

def test_adam_first_step_and_zero_grad():
    params = {"w": np.zeros(3)}
    opt = Adam(["w"], lr=1e-3)
    opt.step(params, {"w": np.ones(3)})
    assert np.allclose(params["w"], -1e-3, rtol=1e-6)
    params = {"w": np.full(2, 0.5)}
    Adam(["w"], lr=1e-3).step(params, {"w": np.zeros(2)})
    assert np.all(params["w"] == 0.5)


def test_adam_matches_scalar_oracle():
    g_seq = [0.3, -1.2]
    params = {"w": np.array([0.7])}
    opt = Adam(["w"], lr=0.01)
    theta, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        opt.step(params, {"w": np.array([g])})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert params["w"][0] == pytest.approx(theta, abs=1e-15)
    assert opt.t == 2


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    opt = Adam(["w"], lr=1e-3)
    with pytest.raises(FloatingPointError):
        opt.step(params, {"w": np.array([np.nan, 0.0])})
    assert np.all(params["w"] == 0) and opt.t == 0


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": np.array([100.0])}
    norm, clipped = clip_grad_norm(g, ["a", "b"], 1.0)
    assert norm == 5.0 and clipped
    assert np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8]) and g["c"][0] == 100.0


@pytest.mark.parametrize("make", [lambda r: RFNetwork(3, hidden=6, rng=r), lambda r: BFNetworks(5, rng=r)])
def test_checkpoint_roundtrip(tmp_path, make):
    net = make(np.random.default_rng(0))
    arch = {"formulation": "x", "network": net.descriptor()}
    save_checkpoint(tmp_path / "a.ckpt", net.params, arch)
    got_arch, params = load_checkpoint(tmp_path / "a.ckpt")
    assert got_arch == arch
    assert params.keys() == net.params.keys()
    assert all(np.array_equal(params[k], net.params[k]) for k in params)
    _, clone = network_from_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", clone.params, arch)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == b"RLPRNGCK"


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
