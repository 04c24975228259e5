"""Experiment configuration, training runs, random baselines and evaluation.

All randomness of a run is derived from ``master_seed`` through named streams
(see `stream_rng`), so a rerun with the same configuration reproduces every
output file byte for byte. Wall-clock timings are the one exception; they go
to a separate ``timing.csv`` and are left out of the metrics CSV unless
``record_wall_time`` is set.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .bitseq import BitSequence, write_bitfile
from .envs import BFConfig, RFConfig, make_env, random_agent_episode, format_trace_line
from .nist import avg_nist
from .neural import BFNetworks, RFNetwork, network_from_checkpoint, save_checkpoint
from .ppo import PPO, PPOConfig, RolloutBuffer, collect_episodes

FORMULATIONS = ("bf", "bf_wanderer", "rf")
CSV_COLUMNS = ("volley", "epoch_start", "episodes", "mean_reward", "std_reward",
               "policy_loss", "value_loss", "mean_kl", "wall_s")
OUTPUT_ROOT_ENV = "RLPRNG_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    formulation: str
    T: int
    B: Optional[int] = None
    N: Optional[int] = None
    buffer_episodes: Optional[int] = None
    epochs: int = 10
    volley_epochs: int = 2
    ppo: PPOConfig = field(default_factory=PPOConfig)
    master_seed: int = 0
    checkpoint_interval: int = 0
    output_dir: str = "runs/experiment"
    lstm_hidden: int = 128
    bf_init: str = "zeros"
    record_wall_time: bool = False

    def __post_init__(self):
        if self.buffer_episodes is None:
            object.__setattr__(self, "buffer_episodes", 1000 if self.formulation == "rf" else 500)
        problems = []
        if self.formulation not in FORMULATIONS:
            problems.append(f"formulation: must be one of {', '.join(FORMULATIONS)}, got {self.formulation!r}")
        elif self.formulation == "rf":
            if self.N is None or self.B is not None:
                problems.append("N/B: rf needs N and no B")
            elif not 1 <= self.N <= 10:
                problems.append("N: must be in 1..10")
        else:
            if self.B is None or self.N is not None:
                problems.append("B/N: bf formulations need B and no N")
            elif self.B < 1:
                problems.append("B: must be >= 1")
        if self.T < 1:
            problems.append("T: must be >= 1")
        if self.buffer_episodes < 1:
            problems.append("buffer_episodes: must be >= 1")
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if self.volley_epochs < 1:
            problems.append("volley_epochs: must be >= 1")
        if self.checkpoint_interval < 0:
            problems.append("checkpoint_interval: must be >= 0")
        if self.lstm_hidden < 1:
            problems.append("lstm_hidden: must be >= 1")
        if self.bf_init not in ("zeros", "random"):
            problems.append("bf_init: must be 'zeros' or 'random'")
        if problems:
            raise ConfigError("invalid experiment config: " + "; ".join(problems))

    def env_config(self) -> Union[BFConfig, RFConfig]:
        if self.formulation == "rf":
            return RFConfig(self.N, self.T)
        return BFConfig(self.B, self.T, wanderer=self.formulation == "bf_wanderer", init=self.bf_init)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# config files: INI-style key = value under [experiment] and [ppo]

_INT_FIELDS = {"T", "B", "N", "buffer_episodes", "epochs", "volley_epochs", "master_seed",
               "checkpoint_interval", "lstm_hidden"}
_BOOL_FIELDS = {"record_wall_time"}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    exp = {}
    for f in dataclasses.fields(cfg):
        if f.name == "ppo":
            continue
        value = getattr(cfg, f.name)
        if value is not None:
            exp[f.name] = _fmt(value)
    parser["experiment"] = exp
    parser["ppo"] = {f.name: _fmt(getattr(cfg.ppo, f.name)) for f in dataclasses.fields(cfg.ppo)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if "experiment" not in parser:
        raise ConfigError("config lacks an [experiment] section")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"ppo"}
    kwargs = {}
    problems = []
    for key, raw in parser["experiment"].items():
        if key not in known:
            problems.append(f"{key}: unknown field")
            continue
        try:
            if key in _INT_FIELDS:
                kwargs[key] = int(raw)
            elif key in _BOOL_FIELDS:
                kwargs[key] = parser["experiment"].getboolean(key)
            else:
                kwargs[key] = raw.strip()
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r}")
    ppo_kwargs = {}
    if "ppo" in parser:
        ppo_fields = {f.name: f for f in dataclasses.fields(PPOConfig)}
        for key, raw in parser["ppo"].items():
            if key not in ppo_fields:
                problems.append(f"ppo.{key}: unknown field")
                continue
            try:
                if key in ("minibatch", "value_epochs_per_policy_epoch", "kl_probe"):
                    ppo_kwargs[key] = int(raw)
                elif key == "max_grad_norm" and raw.strip().lower() == "none":
                    ppo_kwargs[key] = None
                else:
                    ppo_kwargs[key] = float(raw)
            except ValueError:
                problems.append(f"ppo.{key}: cannot parse {raw!r}")
    for required in ("formulation", "T"):
        if required not in kwargs:
            problems.append(f"{required}: missing")
    if problems:
        raise ConfigError("invalid experiment config: " + "; ".join(problems))
    try:
        return ExperimentConfig(ppo=PPOConfig(**ppo_kwargs), **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(path: Union[str, Path], cfg: ExperimentConfig) -> None:
    Path(path).write_text(serialize_config(cfg))


def _preset(name: str, formulation: str, T: int, **kw) -> ExperimentConfig:
    return ExperimentConfig(formulation=formulation, T=T, epochs=100, output_dir=f"runs/{name}", **kw)


PRESETS: Dict[str, ExperimentConfig] = {}
for _B, _T in ((80, 40), (200, 100), (400, 200)):
    PRESETS[f"bf_B{_B}"] = _preset(f"bf_B{_B}", "bf", _T, B=_B)
    PRESETS[f"bf_wanderer_B{_B}"] = _preset(f"bf_wanderer_B{_B}", "bf_wanderer", _T, B=_B)
for _N in (2, 5, 10):
    PRESETS[f"rf_N{_N}"] = _preset(f"rf_N{_N}", "rf", 100, N=_N)


# --------------------------------------------------------------------------
# seeding and output


def stream_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{master_seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(master_seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named consumer of randomness."""
    return np.random.default_rng(stream_seed(master_seed, name))


def resolve_output(path: Union[str, Path]) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def build_network(cfg: ExperimentConfig, rng: np.random.Generator):
    if cfg.formulation == "rf":
        return RFNetwork(cfg.N, hidden=cfg.lstm_hidden, rng=rng)
    return BFNetworks(cfg.B, rng=rng)


def architecture(cfg: ExperimentConfig, net) -> dict:
    arch = {"formulation": cfg.formulation, "T": cfg.T, "network": net.descriptor()}
    if cfg.formulation == "rf":
        arch["N"] = cfg.N
    else:
        arch["B"] = cfg.B
        arch["bf_init"] = cfg.bf_init
    return arch


# --------------------------------------------------------------------------
# records


@dataclass
class VolleyRecord:
    volley: int
    epoch_start: int
    episodes: int
    mean_reward: float
    std_reward: float
    policy_loss: Optional[float] = None
    value_loss: Optional[float] = None
    mean_kl: Optional[float] = None
    wall_s: Optional[float] = None

    def row(self, with_wall: bool) -> List[str]:
        def f(x):
            return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"

        return [str(self.volley), str(self.epoch_start), str(self.episodes), f(self.mean_reward),
                f(self.std_reward), f(self.policy_loss), f(self.value_loss), f(self.mean_kl),
                f(self.wall_s) if with_wall else ""]


def _write_csv(path: Path, records: Sequence[VolleyRecord], with_wall: bool) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row(with_wall))


def read_metrics_csv(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _volley(index: int, epoch_start: int, rewards: Sequence[float], stats=(), wall=None) -> VolleyRecord:
    def mean_of(attr):
        vals = [getattr(s, attr) for s in stats if not np.isnan(getattr(s, attr))]
        return float(np.mean(vals)) if vals else None

    return VolleyRecord(index, epoch_start, len(rewards), float(np.mean(rewards)), float(np.std(rewards)),
                        mean_of("policy_loss"), mean_of("value_loss"), mean_of("mean_kl"), wall)


# --------------------------------------------------------------------------
# commands


@dataclass
class RunResult:
    output_dir: Path
    volleys: List[VolleyRecord]
    epoch_stats: list
    net: object


def run_experiment(cfg: ExperimentConfig, log=None) -> RunResult:
    """Alternate collection and PPO epochs, writing metrics and checkpoints.

    Files written under the output directory: ``config.ini``,
    ``metrics.csv`` (one row per volley), ``episodes.csv`` (every episode's
    total reward), ``timing.csv`` and ``*.ckpt`` checkpoints.
    """
    out = resolve_output(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.ini", cfg)
    net = build_network(cfg, stream_rng(cfg.master_seed, "param-init"))
    trainer = PPO(net, cfg.ppo)
    env_rng = stream_rng(cfg.master_seed, "env-init")
    act_rng = stream_rng(cfg.master_seed, "action-sampling")
    shuffle_rng = stream_rng(cfg.master_seed, "minibatch-shuffle")
    env_cfg = cfg.env_config()
    arch = architecture(cfg, net)

    volleys: List[VolleyRecord] = []
    all_stats = []
    pending_stats, pending_rewards = [], []
    t0 = time.perf_counter()
    volley_t0 = t0
    timing = ["epoch,wall_s"]
    with open(out / "episodes.csv", "w", newline="") as ep_file:
        ep_file.write("epoch,episode,reward\n")
        for epoch in range(cfg.epochs):
            buffer = RolloutBuffer(cfg.buffer_episodes)
            buffer.extend(collect_episodes(lambda: make_env(env_cfg), net, cfg.buffer_episodes,
                                           act_rng, env_rng=env_rng))
            stats = trainer.train_epoch(buffer, shuffle_rng)
            all_stats.append(stats)
            for i, r in enumerate(stats.episode_rewards):
                ep_file.write(f"{epoch},{i},{r!r}\n")
            pending_stats.append(stats)
            pending_rewards.extend(stats.episode_rewards)
            timing.append(f"{epoch},{time.perf_counter() - t0:.3f}")
            if log is not None:
                log(f"epoch {epoch}: mean reward {stats.mean_reward:.4f}, value loss {stats.value_loss:.5f}, "
                    f"policy updates {stats.policy_updates}/{stats.n_minibatches}")
            if len(pending_stats) == cfg.volley_epochs or epoch == cfg.epochs - 1:
                now = time.perf_counter()
                volleys.append(_volley(len(volleys), epoch + 1 - len(pending_stats), pending_rewards,
                                       pending_stats, now - volley_t0))
                volley_t0 = now
                pending_stats, pending_rewards = [], []
                _write_csv(out / "metrics.csv", volleys, cfg.record_wall_time)
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.ckpt", net.params, arch)
    save_checkpoint(out / "final.ckpt", net.params, arch)
    (out / "timing.csv").write_text("\n".join(timing) + "\n")
    return RunResult(out, volleys, all_stats, net)


@dataclass
class BaselineSummary:
    mean: float
    std: float
    rewards: List[float]
    volleys: List[VolleyRecord]


def random_baseline(cfg: ExperimentConfig, episodes: int, output_dir: Optional[Union[str, Path]] = None,
                    trace_path: Optional[Union[str, Path]] = None) -> BaselineSummary:
    """Score a uniformly random agent; nothing is trained.

    Episodes are grouped into volleys of ``buffer_episodes * volley_epochs``
    so the metrics line up with training curves of the same config.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = stream_rng(cfg.master_seed, "random-agent")
    env = make_env(cfg.env_config())
    trace = [] if trace_path is not None else None
    rewards = []
    for k in range(episodes):
        if trace is not None:
            trace.append(f"# episode {k}")
        rewards.append(random_agent_episode(env, rng, trace))
    per_volley = cfg.buffer_episodes * cfg.volley_epochs
    volleys = [
        _volley(i, i * cfg.volley_epochs, rewards[s : s + per_volley])
        for i, s in enumerate(range(0, episodes, per_volley))
    ]
    if output_dir is not None:
        out = resolve_output(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "baseline.csv", volleys, False)
        with open(out / "baseline_episodes.csv", "w") as f:
            f.write("episode,reward\n")
            for i, r in enumerate(rewards):
                f.write(f"{i},{r!r}\n")
    if trace is not None:
        Path(trace_path).write_text("\n".join(trace) + "\n")
    return BaselineSummary(float(np.mean(rewards)), float(np.std(rewards)), rewards, volleys)


@dataclass
class EvalSummary:
    scores: List[float]
    sequences: List[BitSequence]
    files: List[Path] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def evaluate(checkpoint: Union[str, Path], episodes: int, emit_dir: Optional[Union[str, Path]] = None,
             greedy: bool = False, seed: int = 0, formulation: Optional[str] = None,
             trace_path: Optional[Union[str, Path]] = None) -> EvalSummary:
    """Roll out a saved policy and score each final sequence.

    Actions are sampled from the policy unless `greedy`. With `emit_dir`,
    every final sequence is written as ``sequence_XXX.txt``.
    """
    arch, net = network_from_checkpoint(checkpoint)
    if formulation is not None and arch["formulation"] != formulation:
        raise ValueError(f"checkpoint holds a {arch['formulation']} agent, not {formulation}")
    if arch["formulation"] == "rf":
        env_cfg = RFConfig(arch["N"], arch["T"])
        if net.descriptor()["kind"] != "rf" or net.n_bits != arch["N"]:
            raise ValueError("checkpoint network does not match its RF environment")
    else:
        env_cfg = BFConfig(arch["B"], arch["T"], wanderer=arch["formulation"] == "bf_wanderer",
                           init=arch.get("bf_init", "zeros"))
        if net.descriptor()["kind"] != "bf" or net.obs_dim != arch["B"]:
            raise ValueError("checkpoint network does not match its BF environment")
    eps = collect_episodes(lambda: make_env(env_cfg), net, episodes, stream_rng(seed, "eval-actions"),
                           env_rng=stream_rng(seed, "eval-env"), greedy=greedy)
    summary = EvalSummary([e.total_reward for e in eps], [e.final for e in eps])
    if emit_dir is not None:
        d = Path(emit_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, seq in enumerate(summary.sequences):
            path = d / f"sequence_{i:03d}.txt"
            write_bitfile(path, seq)
            summary.files.append(path)
    if trace_path is not None:
        lines = []
        for k, e in enumerate(eps):
            lines.append(f"# episode {k}")
            for t in range(len(e)):
                obs = BitSequence(e.observations[t].astype(np.uint8))
                lines.append(format_trace_line(obs, int(e.actions[t]), float(e.rewards[t])))
        Path(trace_path).write_text("\n".join(lines) + "\n")
    return summary
