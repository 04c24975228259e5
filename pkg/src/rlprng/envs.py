"""Bit-generation decision processes.

`BinaryEnv` is the fully observable formulation: the state is a B-bit
sequence and each of the 2B actions sets one bit. `RecurrentEnv` is the
partially observable one: each of the 2^N actions appends an N-bit pattern
and only the last N bits are observed. Both pay the battery score of the
full sequence at the final step and zero before.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .bitseq import BitSequence, append_pattern, set_bit
from .nist import avg_nist

MAX_PATTERN_BITS = 10


class InvalidActionError(ValueError):
    pass


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass(frozen=True)
class BFConfig:
    B: int
    T: int
    wanderer: bool = False
    init: str = "zeros"

    def __post_init__(self):
        if self.B < 1 or self.T < 1:
            raise ValueError("B and T must be >= 1")
        if self.init not in ("zeros", "random"):
            raise ValueError(f"init must be 'zeros' or 'random', got {self.init!r}")


@dataclass(frozen=True)
class RFConfig:
    N: int
    T: int

    def __post_init__(self):
        if not 1 <= self.N <= MAX_PATTERN_BITS:
            raise ValueError(f"N must be in 1..{MAX_PATTERN_BITS}")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass(frozen=True)
class EnvState:
    full: BitSequence
    t: int


@dataclass(frozen=True)
class StepResult:
    observation: BitSequence
    reward: float
    done: bool


def decode_bf_action(action: int) -> Tuple[int, int]:
    """Action index -> (1-based bit position, value)."""
    return action // 2 + 1, action % 2


def encode_bf_action(n: int, v: int) -> int:
    return 2 * (n - 1) + v


def decode_rf_action(action: int, N: int) -> BitSequence:
    """Action index -> its N-bit big-endian binary expansion."""
    return BitSequence([(action >> (N - 1 - j)) & 1 for j in range(N)])


def encode_rf_action(pattern) -> int:
    a = 0
    for b in pattern:
        a = (a << 1) | int(b)
    return a


class _Env:
    state: Optional[EnvState] = None
    T: int
    n_actions: int

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.t >= self.T

    def _check_step(self, action) -> int:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if self.done:
            raise EpisodeFinishedError("episode is finished; call reset()")
        if not isinstance(action, (int, np.integer)) or not 0 <= action < self.n_actions:
            raise InvalidActionError(f"action {action!r} outside [0, {self.n_actions})")
        return int(action)

    def _reward(self) -> float:
        return avg_nist(self.state.full) if self.done else 0.0

    def action_mask(self) -> np.ndarray:
        return np.ones(self.n_actions, dtype=bool)


class BinaryEnv(_Env):
    """Fully observable B-bit environment; optionally the wanderer variant."""

    def __init__(self, config: BFConfig):
        self.config = config
        self.B = config.B
        self.T = config.T
        self.n_actions = 2 * config.B

    @property
    def obs_dim(self) -> int:
        return self.B

    def reset(self, rng: np.random.Generator) -> BitSequence:
        if self.config.init == "random":
            full = BitSequence(rng.integers(0, 2, size=self.B))
        else:
            full = BitSequence(np.zeros(self.B, dtype=np.uint8))
        self.state = EnvState(full, 0)
        return full

    def action_mask(self) -> np.ndarray:
        if not self.config.wanderer:
            return np.ones(self.n_actions, dtype=bool)
        bits = self.state.full.bits
        mask = np.empty(self.n_actions, dtype=bool)
        mask[0::2] = bits == 1  # setting to 0 is a change only where the bit is 1
        mask[1::2] = bits == 0
        return mask

    def step(self, action: int) -> StepResult:
        action = self._check_step(action)
        if self.config.wanderer and not self.action_mask()[action]:
            raise InvalidActionError(f"action {action} is masked: it would set a bit to itself")
        n, v = decode_bf_action(action)
        self.state = EnvState(set_bit(self.state.full, n, v), self.state.t + 1)
        return StepResult(self.state.full, self._reward(), self.done)


class RecurrentEnv(_Env):
    """Partially observable environment that appends N bits per step."""

    def __init__(self, config: RFConfig):
        self.config = config
        self.N = config.N
        self.T = config.T
        self.n_actions = 2**config.N

    @property
    def obs_dim(self) -> int:
        return self.N

    def reset(self, rng: np.random.Generator) -> BitSequence:
        seed = rng.standard_normal(self.N)
        full = BitSequence((seed >= 0).astype(np.uint8))
        self.state = EnvState(full, 0)
        return full

    def step(self, action: int) -> StepResult:
        action = self._check_step(action)
        pattern = decode_rf_action(action, self.N)
        self.state = EnvState(append_pattern(self.state.full, pattern), self.state.t + 1)
        return StepResult(pattern, self._reward(), self.done)


class OneStepEnv(_Env):
    """A one-step bandit with a fixed reward per action, for sanity checks."""

    def __init__(self, rewards=(1.0, 0.0)):
        self.rewards = tuple(float(r) for r in rewards)
        self.T = 1
        self.n_actions = len(self.rewards)
        self.obs_dim = 1

    def reset(self, rng: np.random.Generator) -> BitSequence:
        self.state = EnvState(BitSequence([1]), 0)
        return self.state.full

    def step(self, action: int) -> StepResult:
        action = self._check_step(action)
        self.state = EnvState(self.state.full, 1)
        return StepResult(self.state.full, self.rewards[action], True)


Env = Union[BinaryEnv, RecurrentEnv, OneStepEnv]


def make_env(config: Union[BFConfig, RFConfig]) -> Env:
    if isinstance(config, BFConfig):
        return BinaryEnv(config)
    if isinstance(config, RFConfig):
        return RecurrentEnv(config)
    raise TypeError(f"unsupported config {config!r}")


def random_agent_episode(env: Env, rng: np.random.Generator, trace: Optional[List[str]] = None) -> float:
    """Play one episode choosing uniformly among allowed actions.

    Returns the total reward, which equals the terminal reward. When `trace`
    is a list, one ``observation action reward`` line is appended per step.
    """
    obs = env.reset(rng)
    total = 0.0
    while True:
        allowed = np.flatnonzero(env.action_mask())
        action = int(allowed[rng.integers(allowed.size)])
        result = env.step(action)
        total += result.reward
        if trace is not None:
            trace.append(format_trace_line(obs, action, result.reward))
        obs = result.observation
        if result.done:
            return total


def format_trace_line(obs: BitSequence, action: int, reward: float) -> str:
    return f"{obs.to_string()} {action} {reward:.6f}"
