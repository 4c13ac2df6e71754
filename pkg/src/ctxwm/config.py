"""INI configuration. Each key lives in a per-module section.

Scale-free hyperparameters default to the full-scale values. Size-related keys
use smaller desk-scale defaults; their help text names the full-scale value.
"""

from __future__ import annotations

import argparse
import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .harness import TrainConfig
from .iql import IqlConfig
from .world_model import WorldModelConfig


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _mix(text: str) -> dict[str, float]:
    out = {}
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        name, _, value = part.partition("=")
        try:
            out[name] = float(value)
        except ValueError:
            raise ConfigError(f"bad quality mix entry {part!r}; use name=fraction") from None
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}={x}" for k, x in v.items())
    return str(v)


@dataclass
class DataConfig:
    family: str = "point-mass-direction"
    tasks: int = 8
    test_id_tasks: int = 4
    test_ood_tasks: int = 4
    episodes: int = 200
    episode_length: int = 100
    mix: dict[str, float] = field(default_factory=lambda: {"random": 0.2, "medium": 0.4, "expert": 0.4})


@dataclass
class EvalConfig:
    episodes: int = 20
    k: int = 3
    adapt_deterministic: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    target: str
    parse: Callable[[Any], Any]
    help: str


# target paths are relative to RunConfig
KEYS: tuple[Key, ...] = (
    Key("data", "family", "data.family", str, "task family"),
    Key("data", "tasks", "data.tasks", int, "training tasks (full scale: 20)"),
    Key("data", "test-id-tasks", "data.test_id_tasks", int, "in-distribution test tasks (full scale: 10)"),
    Key("data", "test-ood-tasks", "data.test_ood_tasks", int, "out-of-distribution test tasks (full scale: 10)"),
    Key("data", "episodes", "data.episodes", int, "offline episodes per task"),
    Key("data", "episode-length", "data.episode_length", int, "steps per episode"),
    Key("data", "mix", "data.mix", _mix, "behaviour quality mix, name=fraction"),
    Key("world_model", "latent-dim", "train.wm.latent_dim", int, "latent width d (full scale: 1024)"),
    Key("world_model", "fsq-levels", "train.wm.fsq_levels", _ints, "FSQ levels per channel"),
    Key("world_model", "obs-encoder-dims", "train.wm.enc_hidden", _ints, "observation encoder hidden dims (full scale: 512)"),
    Key("world_model", "dynamics-dims", "train.wm.dyn_hidden", _ints, "dynamics/reward hidden dims (full scale: 512,512)"),
    Key("world_model", "latent-mode", "train.wm.latent_mode", str, "latent formulation"),
    Key("world_model", "horizon", "train.wm.horizon", int, "training horizon H"),
    Key("world_model", "gamma", "train.wm.gamma", float, "temporal-consistency discount"),
    Key("world_model", "lr", "train.wm.lr", float, "world model learning rate"),
    Key("world_model", "weight-decay", "train.wm.weight_decay", float, "decoupled weight decay"),
    Key("world_model", "momentum", "train.wm.ema_momentum", float, "target encoder EMA momentum"),
    Key("world_model", "gumbel-temperature", "train.wm.temperature", float, "Gumbel-Softmax temperature"),
    Key("world_model", "consistency-coef", "train.wm.consistency_coef", float, "consistency loss weight"),
    Key("world_model", "reward-coef", "train.wm.reward_coef", float, "reward loss weight"),
    Key("context", "context-encoder-dims", "train.wm.ctx_hidden", _ints, "context encoder hidden dims (full scale: 256,256)"),
    Key("context", "task-dim", "train.wm.z_dim", int, "task representation width"),
    Key("context", "bounding", "train.wm.z_bounding", str, "embedding bound: tanh|identity|l2|fsq"),
    Key("context", "contrastive", "train.wm.contrastive", str, "contrastive objective: infonce|focal|none"),
    Key("context", "beta", "train.wm.beta", float, "contrastive weight"),
    Key("context", "alpha", "train.wm.alpha", float, "similarity length scale"),
    Key("context", "bank-momentum", "train.wm.bank_momentum", float, "positive-bank momentum"),
    Key("context", "context-size", "train.context_size", int, "transitions per context set"),
    Key("offline_rl", "algorithm", "train.policy_optimizer", str, "offline RL algorithm"),
    Key("offline_rl", "dims", "train.iql.hidden", _ints, "Q/V/policy hidden dims (full scale: 256,256)"),
    Key("offline_rl", "num-q", "train.iql.num_q", int, "number of Q functions"),
    Key("offline_rl", "lr", "train.iql.lr", float, "policy and value learning rate"),
    Key("offline_rl", "expectile", "train.iql.expectile", float, "expectile tau"),
    Key("offline_rl", "inverse-temperature", "train.iql.temperature", float, "AWR temperature B in exp(A/B)"),
    Key("offline_rl", "gamma", "train.iql.gamma", float, "discount"),
    Key("offline_rl", "momentum", "train.iql.target_momentum", float, "target Q EMA momentum"),
    Key("offline_rl", "weight-clip", "train.iql.weight_clip", float, "AWR weight clip"),
    Key("offline_rl", "batch-size", "train.iql_batch", int, "transitions per IQL update"),
    Key("train", "iterations", "train.iterations", int, "training iterations"),
    Key("train", "meta-batch", "train.meta_batch", int, "tasks per meta-batch (full scale: 16)"),
    Key("train", "segments-per-task", "train.segments_per_task", int, "H-step segments per task per update"),
    Key("train", "schedule", "train.schedule", str, "interleaved|two-phase"),
    Key("train", "log-every", "train.log_every", int, "metric logging period"),
    Key("eval", "episodes", "eval.episodes", int, "evaluation episodes (full scale: 50)"),
    Key("eval", "k", "eval.k", int, "few-shot adaptation trajectories"),
    Key("eval", "adapt-deterministic", "eval.adapt_deterministic", _bool, "deterministic adaptation rollouts"),
)


def _resolve(cfg: RunConfig, target: str) -> tuple[Any, str]:
    *path, attr = target.split(".")
    obj: Any = cfg
    for p in path:
        obj = getattr(obj, p)
    return obj, attr


def get_value(cfg: RunConfig, key: Key):
    obj, attr = _resolve(cfg, key.target)
    return getattr(obj, attr)


def set_value(cfg: RunConfig, key: Key, raw) -> None:
    obj, attr = _resolve(cfg, key.target)
    try:
        setattr(obj, attr, key.parse(raw))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{key.section}] {key.name}: {e}") from None


def _rebuild(cfg: RunConfig) -> RunConfig:
    # re-run dataclass validation after field assignment
    t = cfg.train
    t.iql = IqlConfig(**vars(t.iql))
    t.wm = WorldModelConfig(**vars(t.wm))
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[tuple[str, str], Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    index = {(k.section, k.name): k for k in KEYS}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for name, raw in parser.items(section):
                if (section, name) not in index:
                    raise ConfigError(f"unknown config key [{section}] {name}")
                set_value(cfg, index[(section, name)], raw)
    for (section, name), raw in (overrides or {}).items():
        set_value(cfg, index[(section, name)], raw)
    return _rebuild(cfg)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for k in KEYS:
        if not parser.has_section(k.section):
            parser.add_section(k.section)
        parser.set(k.section, k.name, _fmt(get_value(cfg, k)))
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def flag_name(key: Key) -> str:
    return f"--{key.section.replace('_', '-')}.{key.name}"


def add_config_flags(p: argparse.ArgumentParser, sections: tuple[str, ...], plain: bool = False) -> None:
    """One flag per config key; defaults shown are the built-in values.

    Flags are ``--section.key`` unless ``plain``, in which case ``--key``.
    """
    defaults = RunConfig()
    for k in KEYS:
        if k.section in sections:
            p.add_argument(f"--{k.name}" if plain else flag_name(k), dest=f"cfg::{k.section}::{k.name}", default=None,
                           metavar=k.name.upper().replace("-", "_"),
                           help=f"{k.help} (default: {_fmt(get_value(defaults, k))})")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for dest, value in vars(args).items():
        if dest.startswith("cfg::") and value is not None:
            _, section, name = dest.split("::")
            overrides[(section, name)] = value
    return load_config(getattr(args, "config", None), overrides)
