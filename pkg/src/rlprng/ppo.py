"""PPO-Clip with GAE, per-buffer advantage normalisation and KL early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bitseq import BitSequence
from .neural import Adam, RecurrentState, clip_grad_norm


@dataclass(frozen=True)
class PPOConfig:
    clip_ratio: float = 0.2
    kl_threshold: float = 1.5e-2
    kl_probe: int = 1024
    gae_lambda: float = 0.95
    gamma: float = 1.0
    minibatch: int = 32
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    value_epochs_per_policy_epoch: int = 1
    max_grad_norm: Optional[float] = 10.0

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.kl_threshold < 0:
            raise ValueError("kl_threshold must be >= 0")
        if self.kl_probe < 1:
            raise ValueError("kl_probe must be >= 1")
        if self.minibatch < 1 or self.value_epochs_per_policy_epoch < 1:
            raise ValueError("minibatch and value_epochs_per_policy_epoch must be >= 1")
        if self.lr_policy <= 0 or self.lr_value <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class Transition:
    observation: np.ndarray
    action: int
    log_prob: float
    value: float
    reward: float
    done: bool
    mask: Optional[np.ndarray] = None
    snapshot: Optional[RecurrentState] = None


@dataclass
class Episode:
    """One complete episode stored column-wise.

    ``snap_h``/``snap_c`` hold the recurrent state *before* each step,
    shaped (T, layers, hidden); they are ``None`` for feed-forward agents.
    """

    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    masks: Optional[np.ndarray] = None
    snap_h: Optional[np.ndarray] = None
    snap_c: Optional[np.ndarray] = None
    final: Optional[BitSequence] = None

    def __len__(self) -> int:
        return int(self.actions.size)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def transitions(self) -> Iterator[Transition]:
        for t in range(len(self)):
            snap = None
            if self.snap_h is not None:
                snap = RecurrentState(self.snap_h[t], self.snap_c[t])
            yield Transition(
                self.observations[t], int(self.actions[t]), float(self.log_probs[t]),
                float(self.values[t]), float(self.rewards[t]), bool(self.dones[t]),
                None if self.masks is None else self.masks[t], snap,
            )

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Episode":
        tr = list(transitions)
        snaps = [t.snapshot for t in tr]
        has_snap = snaps and snaps[0] is not None
        has_mask = tr and tr[0].mask is not None
        return cls(
            np.array([t.observation for t in tr], dtype=np.float64),
            np.array([t.action for t in tr], dtype=np.int64),
            np.array([t.log_prob for t in tr]),
            np.array([t.value for t in tr]),
            np.array([t.reward for t in tr]),
            np.array([t.done for t in tr], dtype=bool),
            np.array([t.mask for t in tr]) if has_mask else None,
            np.array([s.h for s in snaps]) if has_snap else None,
            np.array([s.c for s in snaps]) if has_snap else None,
        )


class RolloutBuffer:
    """Holds whole episodes until `capacity_episodes` is reached."""

    def __init__(self, capacity_episodes: int):
        if capacity_episodes < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity_episodes = capacity_episodes
        self.episodes: List[Episode] = []

    def add(self, episode: Episode) -> None:
        if not len(episode) or not episode.dones[-1]:
            raise ValueError("only complete episodes can be stored")
        if self.full:
            raise OverflowError("buffer is already at capacity")
        self.episodes.append(episode)

    def extend(self, episodes) -> None:
        for ep in episodes:
            self.add(ep)

    @property
    def full(self) -> bool:
        return len(self.episodes) >= self.capacity_episodes

    @property
    def n_transitions(self) -> int:
        return sum(len(e) for e in self.episodes)

    def clear(self) -> None:
        self.episodes = []


@dataclass
class TrainStats:
    epoch: int = 0
    policy_loss: float = float("nan")
    value_loss: float = float("nan")
    mean_kl: float = 0.0
    early_stop_step: Optional[int] = None
    n_minibatches: int = 0
    remainder: int = 0
    policy_updates: int = 0
    grad_clips: int = 0
    mean_reward: float = float("nan")
    std_reward: float = float("nan")
    episode_rewards: List[float] = field(default_factory=list)


# --------------------------------------------------------------------------
# estimators and losses


def gae(rewards, values, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Advantages and rewards-to-go of one finished episode (terminal value 0)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = rewards.size
    adv = np.zeros(T)
    ret = np.zeros(T)
    next_value = 0.0
    running_adv = 0.0
    running_ret = 0.0
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_value - values[t]
        running_adv = delta + gamma * lam * running_adv
        running_ret = rewards[t] + gamma * running_ret
        adv[t] = running_adv
        ret[t] = running_ret
        next_value = values[t]
    return adv, ret


def compute_gae(episode: Union[Episode, Sequence[Transition]], gamma: float = 1.0, lam: float = 0.95):
    if not isinstance(episode, Episode):
        episode = Episode.from_transitions(episode)
    if not len(episode) or not episode.dones[-1]:
        raise ValueError("GAE needs a complete episode ending with done=True")
    return gae(episode.rewards, episode.values, gamma, lam)


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def ppo_clip_objective(log_prob_new, log_prob_old, advantage, clip_ratio: float = 0.2) -> float:
    """Mean clipped surrogate; the policy loss is its negative."""
    ratio = np.exp(np.asarray(log_prob_new) - np.asarray(log_prob_old))
    adv = np.asarray(advantage, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return float(np.mean(np.minimum(ratio * adv, clipped * adv)))


def clip_loss_grad(log_prob_new, log_prob_old, advantage, clip_ratio: float):
    """Clip loss and its gradient with respect to `log_prob_new`."""
    ratio = np.exp(log_prob_new - log_prob_old)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    surr = ratio * advantage
    surr_clipped = clipped * advantage
    m = log_prob_new.size
    active = surr <= surr_clipped
    loss = -float(np.mean(np.minimum(surr, surr_clipped)))
    dlogp = np.where(active, -surr / m, 0.0)
    return loss, dlogp


def value_loss(values_predicted, returns) -> float:
    pred = np.asarray(values_predicted, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    if pred.shape != ret.shape:
        raise ValueError("predictions and returns differ in shape")
    return float(np.mean((pred - ret) ** 2))


def kl_estimate(log_probs_old, log_probs_new) -> float:
    """Sampled forward-KL estimate from actions drawn by the old policy."""
    return float(np.mean(np.asarray(log_probs_old) - np.asarray(log_probs_new)))


def kl_exceeded(kl: float, threshold: float) -> bool:
    # the sampled estimator can go negative; large drift either way stops the policy
    return abs(kl) > threshold


# --------------------------------------------------------------------------
# rollouts


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = 1.0 - rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    actions = (cdf < u[:, None]).sum(axis=1)
    last_allowed = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(actions, last_allowed)


def collect_episodes(
    env_factory: Callable[[], object],
    net,
    count: int,
    rng: np.random.Generator,
    env_rng: Optional[np.random.Generator] = None,
    greedy: bool = False,
) -> List[Episode]:
    """Run `count` episodes in lockstep with the current policy.

    All environments share the same horizon, so the policy is evaluated on
    the whole batch at once. `env_rng` draws initial states (defaults to
    `rng`); `rng` draws actions.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    env_rng = env_rng if env_rng is not None else rng
    envs = [env_factory() for _ in range(count)]
    obs = [e.reset(env_rng) for e in envs]
    T = envs[0].T
    state = net.initial_state(count)
    cols = {k: [] for k in ("obs", "act", "logp", "val", "rew", "done", "mask", "h", "c")}
    for _ in range(T):
        x = np.array([o.bits for o in obs], dtype=np.float64)
        mask = np.array([e.action_mask() for e in envs])
        logp, values, new_state, _ = net.step(x, state, mask)
        probs = np.exp(logp)
        actions = np.argmax(probs, axis=1) if greedy else _sample(probs, rng)
        results = [e.step(int(a)) for e, a in zip(envs, actions)]
        cols["obs"].append(x)
        cols["act"].append(actions)
        cols["logp"].append(logp[np.arange(count), actions])
        cols["val"].append(values)
        cols["rew"].append([r.reward for r in results])
        cols["done"].append([r.done for r in results])
        cols["mask"].append(mask)
        if state is not None:
            cols["h"].append(state.h.transpose(1, 0, 2))
            cols["c"].append(state.c.transpose(1, 0, 2))
        state = new_state
        obs = [r.observation for r in results]
    stacked = {k: np.stack([np.asarray(v) for v in vs], axis=1) for k, vs in cols.items() if vs}
    recurrent = "h" in stacked
    masked = not stacked["mask"].all()
    episodes = []
    for i, env in enumerate(envs):
        episodes.append(Episode(
            stacked["obs"][i], stacked["act"][i].astype(np.int64), stacked["logp"][i],
            stacked["val"][i], stacked["rew"][i].astype(np.float64), stacked["done"][i].astype(bool),
            stacked["mask"][i] if masked else None,
            stacked["h"][i] if recurrent else None,
            stacked["c"][i] if recurrent else None,
            env.state.full,
        ))
    return episodes


# --------------------------------------------------------------------------
# training


class PPO:
    """Owns the two optimizers of an actor-critic network.

    The policy optimizer covers the policy head plus any shared trunk; the
    value optimizer covers the value head plus the same trunk, so a shared
    trunk keeps training through the value loss after a policy early stop.
    """

    def __init__(self, net, config: PPOConfig = PPOConfig()):
        self.net = net
        self.config = config
        self.policy_opt = Adam(net.policy_group, config.lr_policy)
        self.value_opt = Adam(net.value_group, config.lr_value)
        self.epochs_done = 0
        self.on_policy_step: Optional[Callable[[int], None]] = None

    def _batch(self, episodes: Sequence[Episode]):
        cfg = self.config
        adv, ret = zip(*(gae(e.rewards, e.values, cfg.gamma, cfg.gae_lambda) for e in episodes))
        data = {
            "obs": np.concatenate([e.observations for e in episodes]),
            "act": np.concatenate([e.actions for e in episodes]),
            "logp": np.concatenate([e.log_probs for e in episodes]),
            "adv": normalize_advantages(np.concatenate(adv)),
            "ret": np.concatenate(ret),
        }
        if episodes[0].masks is not None:
            data["mask"] = np.concatenate([e.masks for e in episodes])
        if episodes[0].snap_h is not None:
            data["h"] = np.concatenate([e.snap_h for e in episodes])
            data["c"] = np.concatenate([e.snap_c for e in episodes])
        return data

    def evaluate_minibatch(self, data, idx):
        """Forward pass on stored transitions; returns (log_probs, values, tape)."""
        state = None
        if "h" in data:
            state = RecurrentState(data["h"][idx].transpose(1, 0, 2), data["c"][idx].transpose(1, 0, 2))
        mask = data["mask"][idx] if "mask" in data else None
        logp_all, values, _, tape = self.net.step(data["obs"][idx], state, mask)
        return logp_all, values, tape

    def probe_kl(self, data, idx) -> float:
        logp_all, _, _ = self.evaluate_minibatch(data, idx)
        return kl_estimate(data["logp"][idx], logp_all[np.arange(idx.size), data["act"][idx]])

    def train_epoch(self, buffer: RolloutBuffer, rng: np.random.Generator) -> TrainStats:
        """One shuffled pass over the buffer in minibatches, then empty it."""
        cfg = self.config
        if not buffer.full:
            raise ValueError(
                f"buffer holds {len(buffer.episodes)} of {buffer.capacity_episodes} episodes; train at capacity"
            )
        rewards = [e.total_reward for e in buffer.episodes]
        data = self._batch(buffer.episodes)
        n = data["act"].size
        stats = TrainStats(
            epoch=self.epochs_done,
            mean_reward=float(np.mean(rewards)),
            std_reward=float(np.std(rewards)),
            episode_rewards=rewards,
            remainder=n % cfg.minibatch,
        )
        params = self.net.params
        policy_active = True
        updated = False
        p_losses, v_losses, kls = [], [], []
        # fixed subsample on which the mean KL from the collection policy is tracked
        probe = np.sort(rng.permutation(n)[: cfg.kl_probe])
        for sweep in range(cfg.value_epochs_per_policy_epoch):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = perm[start : start + cfg.minibatch]
                m = idx.size
                do_policy = sweep == 0 and policy_active
                if do_policy and updated:
                    kl = self.probe_kl(data, probe)
                    kls.append(kl)
                    if kl_exceeded(kl, cfg.kl_threshold):
                        policy_active = do_policy = False
                        stats.early_stop_step = stats.n_minibatches
                logp_all, values, tape = self.evaluate_minibatch(data, idx)
                logp_new = logp_all[np.arange(m), data["act"][idx]]
                if do_policy:
                    loss, dsel = clip_loss_grad(logp_new, data["logp"][idx], data["adv"][idx], cfg.clip_ratio)
                    dlogp = np.zeros_like(logp_all)
                    dlogp[np.arange(m), data["act"][idx]] = dsel
                    g = self.net.backward(tape, dlogp, None)
                    _, clipped = clip_grad_norm(g, self.net.policy_group, cfg.max_grad_norm)
                    stats.grad_clips += clipped
                    p_losses.append(loss)
                # value gradient comes from the same forward pass as the policy gradient
                ret = data["ret"][idx]
                v_losses.append(value_loss(values, ret))
                gv = self.net.backward(tape, None, 2.0 * (values - ret) / m)
                _, clipped = clip_grad_norm(gv, self.net.value_group, cfg.max_grad_norm)
                stats.grad_clips += clipped
                if do_policy:
                    self.policy_opt.step(params, g)
                    stats.policy_updates += 1
                    updated = True
                    if self.on_policy_step is not None:
                        self.on_policy_step(stats.n_minibatches)
                self.value_opt.step(params, gv)
                if sweep == 0:
                    stats.n_minibatches += 1
        stats.policy_loss = float(np.mean(p_losses)) if p_losses else float("nan")
        stats.value_loss = float(np.mean(v_losses))
        stats.mean_kl = float(np.mean(kls)) if kls else 0.0
        buffer.clear()
        self.epochs_done += 1
        return stats
