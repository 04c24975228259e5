"""Pseudo-random bit generators learned with PPO and scored by a NIST-style battery."""

from .bitseq import BitSequence, read_bitfile, write_bitfile
from .envs import BFConfig, BinaryEnv, RFConfig, RecurrentEnv, make_env
from .nist import avg_nist, run_battery
from .ppo import PPO, PPOConfig

__all__ = [
    "BitSequence", "read_bitfile", "write_bitfile",
    "BFConfig", "BinaryEnv", "RFConfig", "RecurrentEnv", "make_env",
    "avg_nist", "run_battery",
    "PPO", "PPOConfig",
]
