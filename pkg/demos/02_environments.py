#!/usr/bin/env python3
# The two decision processes and their random agents.

# %%
import numpy as np

from rlprng.bitseq import BitSequence
from rlprng.envs import BFConfig, RFConfig, decode_rf_action, encode_bf_action, encode_rf_action, make_env, random_agent_episode

# %% RF: every action appends an N-bit pattern; only the pattern is observed.
env = make_env(RFConfig(N=3, T=2))
env.reset(np.random.default_rng(0))
env.state = type(env.state)(BitSequence.from_string("001"), 0)
for pattern in ([1, 1, 1], [1, 0, 1]):
    r = env.step(encode_rf_action(pattern))
    print("obs", r.observation.to_string(), "full", env.state.full.to_string(), "reward", round(r.reward, 4))
print("action 5 with N=3 is", decode_rf_action(5, 3).to_string())

# %% BF: every action sets one bit of a fixed-length state.
env = make_env(BFConfig(B=4, T=3, wanderer=True))
obs = env.reset(np.random.default_rng(0))
print("start", obs.to_string(), "allowed actions", np.flatnonzero(env.action_mask()))
r = env.step(encode_bf_action(2, 1))
print("after setting bit 2 to 1:", r.observation.to_string())
print("allowed now", np.flatnonzero(env.action_mask()))

# %% Random agents. BF starts from all zeros, so a random agent only reaches
# about T/2 ones in a B-bit state; the wanderer cannot undo its own progress
# as easily, and RF sequences are fair coin flips.
rng = np.random.default_rng(1)
for cfg in (BFConfig(200, 100), BFConfig(200, 100, wanderer=True), RFConfig(5, 100)):
    env = make_env(cfg)
    rewards = [random_agent_episode(env, rng) for _ in range(100)]
    print(f"{cfg}: mean reward {np.mean(rewards):.3f}")
