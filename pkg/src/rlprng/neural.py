"""Dense and LSTM layers with hand-written reverse-mode gradients.

Two actor-critic architectures are built from them:

* `RFNetwork`: two stacked LSTM layers shared by a policy head and a value
  head (dense 256-128-64 each).
* `BFNetworks`: fully separate dense policy and value networks
  (256-512-256 each).

Everything is float64 and batch-first. Parameters live in a flat
``dict[str, ndarray]`` so optimizers and checkpoints can treat both
architectures alike.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

Params = Dict[str, np.ndarray]


# --------------------------------------------------------------------------
# initialisation and activations


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrix of shape (fan_out, fan_in)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Log-probabilities over the last axis; masked-out entries get -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("action mask allows no action")
        logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    return np.exp(log_softmax(logits, mask))


_ACTIVATIONS = {"relu": relu, "identity": lambda z: z, "softmax": softmax}


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "relu") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match layer fan-in {W.shape[1]}")
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(x @ W.T + b)


# --------------------------------------------------------------------------
# MLP heads: ReLU hidden layers followed by a linear output layer


def mlp_init(prefix: str, sizes: Sequence[int], rng: np.random.Generator) -> Params:
    params = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}{i}.W"] = xavier_init(fi, fo, rng)
        params[f"{prefix}{i}.b"] = np.zeros(fo)
    return params


def _mlp_depth(params: Params, prefix: str) -> int:
    depth = 0
    while f"{prefix}{depth}.W" in params:
        depth += 1
    return depth


def mlp_forward(params: Params, prefix: str, x: np.ndarray):
    depth = _mlp_depth(params, prefix)
    inputs, pre = [], []
    a = x
    for i in range(depth):
        inputs.append(a)
        z = a @ params[f"{prefix}{i}.W"].T + params[f"{prefix}{i}.b"]
        pre.append(z)
        a = relu(z) if i < depth - 1 else z
    return a, (inputs, pre)


def mlp_backward(params: Params, prefix: str, cache, dout: np.ndarray, grads: Params) -> np.ndarray:
    """Accumulate parameter gradients into `grads`; return the input gradient."""
    inputs, pre = cache
    depth = len(inputs)
    d = dout
    for i in reversed(range(depth)):
        if i < depth - 1:
            d = d * (pre[i] > 0)
        grads[f"{prefix}{i}.W"] += d.T @ inputs[i]
        grads[f"{prefix}{i}.b"] += d.sum(axis=0)
        d = d @ params[f"{prefix}{i}.W"]
    return d


# --------------------------------------------------------------------------
# LSTM


def lstm_init(prefix: str, in_size: int, hidden: int, rng: np.random.Generator) -> Params:
    """Gate order along the stacked axis is input, forget, cell, output."""
    Wx = np.concatenate([xavier_init(in_size, hidden, rng) for _ in range(4)])
    Wh = np.concatenate([xavier_init(hidden, hidden, rng) for _ in range(4)])
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0
    return {f"{prefix}.Wx": Wx, f"{prefix}.Wh": Wh, f"{prefix}.b": b}


@dataclass
class RecurrentState:
    """Hidden and cell vectors, each shaped (layers, batch, hidden)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, layers: int, batch: int, hidden: int) -> "RecurrentState":
        return cls(np.zeros((layers, batch, hidden)), np.zeros((layers, batch, hidden)))

    def take(self, idx) -> "RecurrentState":
        return RecurrentState(self.h[:, idx], self.c[:, idx])

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.h.copy(), self.c.copy())


def lstm_step(Wx, Wh, b, x, h, c):
    """One LSTM cell update. Returns ``(h_new, c_new, cache)``."""
    H = Wh.shape[1]
    if x.shape[-1] != Wx.shape[1] or h.shape[-1] != H or c.shape[-1] != H:
        raise ValueError("LSTM input or state shape does not match parameters")
    z = x @ Wx.T + h @ Wh.T + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def lstm_step_backward(Wx, Wh, cache, dh_new, dc_new):
    """Returns ``(dWx, dWh, db, dx, dh_prev, dc_prev)``."""
    x, h, c, i, f, g, o, tc = cache
    dc = dc_new + dh_new * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh_new * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return dz.T @ x, dz.T @ h, dz.sum(axis=0), dz @ Wx, dz @ Wh, dc * f


# --------------------------------------------------------------------------
# architectures


@dataclass
class Tape:
    """Record of a forward pass, consumed by ``backward``."""

    steps: list
    mask: Optional[np.ndarray]
    log_probs: np.ndarray
    batch: int


class _ActorCritic:
    """Shared plumbing for the two architectures."""

    params: Params
    policy_keys: Tuple[str, ...]
    value_keys: Tuple[str, ...]
    shared_keys: Tuple[str, ...] = ()
    recurrent = False

    def zero_grads(self) -> Params:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def policy_group(self) -> Tuple[str, ...]:
        return self.shared_keys + self.policy_keys

    @property
    def value_group(self) -> Tuple[str, ...]:
        return self.shared_keys + self.value_keys

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @staticmethod
    def _dlogits(logp: np.ndarray, dlogp: np.ndarray) -> np.ndarray:
        p = np.exp(logp)
        dlogp = np.where(np.isfinite(logp), dlogp, 0.0)
        return dlogp - p * dlogp.sum(axis=-1, keepdims=True)


class RFNetwork(_ActorCritic):
    """LSTM trunk with separate policy and value heads."""

    recurrent = True

    def __init__(
        self,
        n_bits: int,
        hidden: int = 128,
        head: Sequence[int] = (256, 128, 64),
        rng: Optional[np.random.Generator] = None,
        params: Optional[Params] = None,
        layers: int = 2,
    ):
        self.n_bits = n_bits
        self.n_actions = 2**n_bits
        self.hidden = hidden
        self.head = tuple(head)
        self.layers = layers
        if params is None:
            rng = rng if rng is not None else np.random.default_rng()
            params = {}
            for layer in range(layers):
                params.update(lstm_init(f"lstm{layer}", n_bits if layer == 0 else hidden, hidden, rng))
            params.update(mlp_init("pi", (hidden, *self.head, self.n_actions), rng))
            params.update(mlp_init("v", (hidden, *self.head, 1), rng))
        self.params = params
        self.shared_keys = tuple(k for k in params if k.startswith("lstm"))
        self.policy_keys = tuple(k for k in params if k.startswith("pi"))
        self.value_keys = tuple(k for k in params if k.startswith("v"))

    def descriptor(self) -> dict:
        return {"kind": "rf", "N": self.n_bits, "hidden": self.hidden, "head": list(self.head), "layers": self.layers}

    def initial_state(self, batch: int = 1) -> RecurrentState:
        return RecurrentState.zeros(self.layers, batch, self.hidden)

    def _trunk(self, x, state: RecurrentState):
        hs, cs, caches = [], [], []
        inp = x
        for layer in range(self.layers):
            p = f"lstm{layer}"
            h, c, cache = lstm_step(self.params[p + ".Wx"], self.params[p + ".Wh"], self.params[p + ".b"],
                                    inp, state.h[layer], state.c[layer])
            hs.append(h)
            cs.append(c)
            caches.append(cache)
            inp = h
        return inp, RecurrentState(np.stack(hs), np.stack(cs)), caches

    def forward_sequence(self, obs_seq: np.ndarray, state: RecurrentState, mask=None):
        """Run a (T, batch, N) observation sequence from `state`.

        Returns ``(log_probs (T,batch,A), values (T,batch), final_state, tape)``.
        """
        obs_seq = np.asarray(obs_seq, dtype=np.float64)
        if obs_seq.ndim != 3 or obs_seq.shape[-1] != self.n_bits:
            raise ValueError(f"expected observations shaped (T, batch, {self.n_bits}), got {obs_seq.shape}")
        if state.h.shape[1] != obs_seq.shape[1] or state.h.shape[2] != self.hidden:
            raise ValueError("recurrent state does not match batch or hidden size")
        steps, logps, values = [], [], []
        for x in obs_seq:
            trunk, state, lstm_caches = self._trunk(x, state)
            logits, pi_cache = mlp_forward(self.params, "pi", trunk)
            value, v_cache = mlp_forward(self.params, "v", trunk)
            logps.append(log_softmax(logits, mask))
            values.append(value[:, 0])
            steps.append((lstm_caches, pi_cache, v_cache))
        logp = np.stack(logps)
        return logp, np.stack(values), state, Tape(steps, mask, logp, obs_seq.shape[1])

    def step(self, obs, state: RecurrentState, mask=None):
        """Single step. Returns ``(log_probs, values, new_state, tape)``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        logp, values, new_state, tape = self.forward_sequence(obs[None], state, mask)
        return logp[0], values[0], new_state, tape

    def forward(self, obs, state: RecurrentState):
        """Action probabilities, state value and next recurrent state."""
        single = np.ndim(obs) == 1
        if single and state.h.ndim == 2:
            state = RecurrentState(state.h[:, None], state.c[:, None])
        logp, value, new_state, _ = self.step(obs, state)
        probs = np.exp(logp)
        if single:
            return probs[0], float(value[0]), new_state
        return probs, value, new_state

    def backward(self, tape: Tape, dlogp: Optional[np.ndarray] = None, dvalue: Optional[np.ndarray] = None) -> Params:
        """Gradients of a scalar loss given dL/dlog_probs and dL/dvalues.

        Shapes follow `forward_sequence` outputs, or the squeezed single-step
        outputs of `step`. Backpropagates through time over all recorded
        steps.
        """
        T = len(tape.steps)
        if dlogp is not None and dlogp.ndim == 2:
            dlogp = dlogp[None]
        if dvalue is not None and dvalue.ndim == 1:
            dvalue = dvalue[None]
        grads = self.zero_grads()
        B, H = tape.batch, self.hidden
        dh_next = np.zeros((self.layers, B, H))
        dc_next = np.zeros((self.layers, B, H))
        for t in reversed(range(T)):
            lstm_caches, pi_cache, v_cache = tape.steps[t]
            dtrunk = np.zeros((B, H))
            if dlogp is not None:
                dlogits = self._dlogits(tape.log_probs[t], dlogp[t])
                dtrunk += mlp_backward(self.params, "pi", pi_cache, dlogits, grads)
            if dvalue is not None:
                dtrunk += mlp_backward(self.params, "v", v_cache, dvalue[t][:, None], grads)
            dh = dtrunk
            for layer in reversed(range(self.layers)):
                p = f"lstm{layer}"
                dWx, dWh, db, dx, dh_prev, dc_prev = lstm_step_backward(
                    self.params[p + ".Wx"], self.params[p + ".Wh"], lstm_caches[layer],
                    dh + dh_next[layer], dc_next[layer])
                grads[p + ".Wx"] += dWx
                grads[p + ".Wh"] += dWh
                grads[p + ".b"] += db
                dh_next[layer] = dh_prev
                dc_next[layer] = dc_prev
                dh = dx
        return grads


class BFNetworks(_ActorCritic):
    """Disjoint dense policy and value networks over the full bit state."""

    def __init__(
        self,
        obs_dim: int,
        n_actions: Optional[int] = None,
        hidden: Sequence[int] = (256, 512, 256),
        rng: Optional[np.random.Generator] = None,
        params: Optional[Params] = None,
    ):
        self.obs_dim = obs_dim
        self.n_actions = n_actions if n_actions is not None else 2 * obs_dim
        self.hidden_sizes = tuple(hidden)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng()
            params = {}
            params.update(mlp_init("pi", (obs_dim, *self.hidden_sizes, self.n_actions), rng))
            params.update(mlp_init("v", (obs_dim, *self.hidden_sizes, 1), rng))
        self.params = params
        self.policy_keys = tuple(k for k in params if k.startswith("pi"))
        self.value_keys = tuple(k for k in params if k.startswith("v"))

    def descriptor(self) -> dict:
        return {"kind": "bf", "obs_dim": self.obs_dim, "n_actions": self.n_actions, "hidden": list(self.hidden_sizes)}

    def initial_state(self, batch: int = 1):
        return None

    def step(self, obs, state=None, mask=None):
        """Returns ``(log_probs, values, None, tape)`` for a batch of observations."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"expected observations of width {self.obs_dim}, got {obs.shape[-1]}")
        logits, pi_cache = mlp_forward(self.params, "pi", obs)
        value, v_cache = mlp_forward(self.params, "v", obs)
        logp = log_softmax(logits, mask)
        return logp, value[:, 0], None, Tape([(pi_cache, v_cache)], mask, logp[None], obs.shape[0])

    def forward(self, obs, mask=None):
        """Action probabilities and state value; masked actions get probability 0."""
        single = np.ndim(obs) == 1
        logp, value, _, _ = self.step(obs, mask=mask)
        probs = np.exp(logp)
        if single:
            return probs[0], float(value[0])
        return probs, value

    def backward(self, tape: Tape, dlogp: Optional[np.ndarray] = None, dvalue: Optional[np.ndarray] = None) -> Params:
        grads = self.zero_grads()
        pi_cache, v_cache = tape.steps[0]
        if dlogp is not None:
            dlogp = dlogp.reshape(tape.log_probs[0].shape)
            mlp_backward(self.params, "pi", pi_cache, self._dlogits(tape.log_probs[0], dlogp), grads)
        if dvalue is not None:
            mlp_backward(self.params, "v", v_cache, np.reshape(dvalue, (-1, 1)), grads)
        return grads


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction over a named subset of a parameter dict."""

    def __init__(self, keys: Iterable[str], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.keys = tuple(keys)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        for k in self.keys:
            if not np.all(np.isfinite(grads[k])):
                raise FloatingPointError(f"non-finite gradient for {k}; update rejected")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in self.keys:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grads: Params, keys: Sequence[str], max_norm: float) -> Tuple[float, bool]:
    """Scale the selected gradients in place; returns (pre-clip norm, clipped?)."""
    norm = float(np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in keys:
            grads[k] *= scale
        return norm, True
    return norm, False


# --------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   8 bytes   magic b"RLPRNGCK"
#   uint32    format version
#   uint32    header length L
#   L bytes   UTF-8 JSON header {"architecture": {...}, "tensors": [{"name", "shape"}, ...]}
#   payload   each tensor in header order, float64 little-endian, C order

CHECKPOINT_MAGIC = b"RLPRNGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], params: Params, architecture: dict) -> None:
    names = sorted(params)
    header = {
        "architecture": architecture,
        "tensors": [{"name": k, "shape": list(params[k].shape)} for k in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[dict, Params]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    params = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        params[t["name"]] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return header["architecture"], params


def network_from_checkpoint(path: Union[str, Path]):
    arch, params = load_checkpoint(path)
    net = arch["network"]
    if net["kind"] == "rf":
        model = RFNetwork(net["N"], hidden=net["hidden"], head=net["head"], params=params, layers=net["layers"])
    elif net["kind"] == "bf":
        model = BFNetworks(net["obs_dim"], net["n_actions"], hidden=net["hidden"], params=params)
    else:
        raise ValueError(f"unknown network kind {net['kind']!r}")
    return arch, model
