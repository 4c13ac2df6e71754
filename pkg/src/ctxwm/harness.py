"""Meta-training loop and meta-test protocols (zero-shot / few-shot)."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import envs
from .checkpoint import load_checkpoint, save_checkpoint
from .context import ContextEncoder, encode_context
from .envs import TaskDataset, TaskSpec
from .errors import ConfigError, DimensionError
from .iql import Batch, IqlAgent, IqlConfig, make_policy_optimizer
from .world_model import MetaBatch, WorldModel, WorldModelConfig, WorldModelTrainer

log = logging.getLogger(__name__)

WM_HEADER = ["step", "L_TC", "CE_mean", "reward_MSE", "L_InfoNCE"]
IQL_HEADER = ["step", "L_V", "L_Q", "L_pi", "mean_advantage", "mean_awr_weight"]
RESULT_HEADER = ["task_id", "protocol", "k", "episode", "return", "success"]


@dataclass
class TrainConfig:
    iterations: int = 5000
    meta_batch: int = 8
    context_size: int = 64
    segments_per_task: int = 32
    iql_batch: int = 256
    schedule: str = "interleaved"
    context_sampling: str = "episode"
    iql_iterations: int | None = None
    log_every: int = 10
    policy_optimizer: str = "iql"
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        wm = WorldModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("wm").items()})
        iql = IqlConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("iql").items()})
        return cls(wm=wm, iql=iql, **d)


class TaskBuffer:
    """Tensor view of one task's offline data with segment indexing."""

    def __init__(self, ds: TaskDataset, horizon: int) -> None:
        self.task_id = ds.task_id
        self.spec = ds.spec
        f = lambda x: torch.as_tensor(np.asarray(x), dtype=torch.float32)
        self.s, self.a, self.r, self.sp, self.done = f(ds.s), f(ds.a), f(ds.r), f(ds.sp), f(ds.done)
        self.context_inputs = torch.cat([self.s, self.a, self.r[:, None], self.sp], dim=-1)
        n = len(ds)
        ends = np.arange(n) + horizon - 1
        ok = ends < n
        idx = np.arange(n)[ok]
        ok_idx = (ds.episode[ends[ok]] == ds.episode[idx]) & (ds.t[ends[ok]] == ds.t[idx] + horizon - 1)
        self.starts = idx[ok_idx]
        _, first, count = np.unique(ds.episode, return_index=True, return_counts=True)
        self.episodes = np.stack([first, count], axis=1)
        self.horizon = horizon
        if len(self.starts) == 0:
            raise ConfigError(f"task {ds.task_id}: no episode is longer than the horizon {horizon}")

    def __len__(self) -> int:
        return len(self.r)

    def segments(self, starts: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        steps = torch.as_tensor(starts)[:, None] + torch.arange(self.horizon)[None]
        obs = torch.cat([self.s[steps], self.sp[steps[:, -1:]]], dim=1)
        return obs, self.a[steps], self.r[steps]


class SpcModel:
    """Context encoder + world model + offline-RL agent."""

    def __init__(self, obs_dim: int, act_dim: int, cfg: TrainConfig) -> None:
        w = cfg.wm
        self.obs_dim, self.act_dim, self.cfg = obs_dim, act_dim, cfg
        self.encoder = ContextEncoder(obs_dim, act_dim, w.z_dim, w.ctx_hidden, w.z_bounding, w.fsq_levels)
        self.wm = WorldModel(obs_dim, act_dim, w.z_dim, w.latent_dim, w.fsq_levels, w.enc_hidden, w.dyn_hidden,
                             w.latent_mode, w.ema_momentum)
        self.agent: IqlAgent = make_policy_optimizer(cfg.policy_optimizer, w.latent_dim, act_dim, w.z_dim, cfg.iql)

    @property
    def z_dim(self) -> int:
        return self.encoder.z_dim

    @torch.no_grad()
    def latent(self, s) -> torch.Tensor:
        return self.wm.phi(torch.as_tensor(np.asarray(s), dtype=torch.float32))

    @torch.no_grad()
    def embed(self, s, a, r, sp) -> torch.Tensor:
        x = torch.cat([torch.as_tensor(np.asarray(v, dtype=np.float64).reshape(-1), dtype=torch.float32)
                       for v in (s, a, [r], sp)])
        return self.encoder(x)

    @torch.no_grad()
    def act(self, s, z: torch.Tensor, deterministic: bool = True, generator=None) -> np.ndarray:
        c = self.latent(s)
        return self.agent.act(c, z, deterministic, generator).double().numpy()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        modules = {"context": self.encoder.state_dict(), "world_model": self.wm.state_dict()}
        for name, state in self.agent.state_tensors().items():
            modules[f"agent.{name}"] = state
        meta = {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "config": self.cfg.to_json(), **(extra or {})}
        save_checkpoint(path, modules, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SpcModel":
        modules, meta = load_checkpoint(path)
        model = cls(meta["obs_dim"], meta["act_dim"], TrainConfig.from_json(meta["config"]))
        model.encoder.load_state_dict(modules["context"])
        model.wm.load_state_dict(modules["world_model"])
        model.agent.load_state_tensors({k[len("agent."):]: v for k, v in modules.items() if k.startswith("agent.")})
        model.meta = meta
        return model


class SpcTrainer:
    """Meta-training loop: world model + context update, IQL update, bank update."""

    def __init__(self, datasets: Sequence[TaskDataset], cfg: TrainConfig, seed: int = 0) -> None:
        if not datasets:
            raise ConfigError("no training datasets")
        spec = datasets[0].spec
        n_obs, n_act = envs.obs_dim(spec), envs.act_dim(spec)
        for ds in datasets:
            if ds.s.shape[1] != n_obs or ds.a.shape[1] != n_act:
                raise DimensionError(f"task {ds.task_id} has mismatched observation/action widths")
        if cfg.schedule not in ("interleaved", "two-phase"):
            raise ConfigError(f"unknown schedule {cfg.schedule!r}")
        if cfg.context_sampling not in ("episode", "dataset"):
            raise ConfigError(f"unknown context sampling {cfg.context_sampling!r}")
        if len(datasets) < 2:
            log.warning("training with a single task: the contrastive objective is disabled")
        self.cfg = cfg
        self.seed = seed
        torch.manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.buffers = [TaskBuffer(ds, cfg.wm.horizon) for ds in datasets]
        self.meta_batch = min(cfg.meta_batch, len(self.buffers))
        self.model = SpcModel(n_obs, n_act, cfg)
        self.wm_trainer = WorldModelTrainer(
            self.model.wm, self.model.encoder, [b.task_id for b in self.buffers], cfg.wm, self.gen
        )
        self.wm_rows: list[list] = []
        self.iql_rows: list[list] = []
        self.step = 0

    # -- sampling -----------------------------------------------------------------

    def _tasks(self) -> np.ndarray:
        return self.rng.choice(len(self.buffers), size=self.meta_batch, replace=False)

    def _context_index(self, b: TaskBuffer) -> np.ndarray:
        n = self.cfg.context_size
        if self.cfg.context_sampling == "dataset":
            return self.rng.integers(0, len(b), n)
        # one episode per context, as at test time
        first, count = b.episodes[self.rng.integers(len(b.episodes))]
        return first + self.rng.integers(0, count, n)

    def _contexts(self, tasks) -> torch.Tensor:
        return torch.stack([b.context_inputs[self._context_index(b)]
                            for b in (self.buffers[i] for i in tasks)])

    def sample_meta_batch(self, tasks) -> MetaBatch:
        contexts = self._contexts(tasks)
        obs, act, rew = [], [], []
        for i in tasks:
            b = self.buffers[i]
            o, a, r = b.segments(self.rng.choice(b.starts, self.cfg.segments_per_task))
            obs.append(o)
            act.append(a)
            rew.append(r)
        return MetaBatch([self.buffers[i].task_id for i in tasks], contexts,
                         torch.stack(obs), torch.stack(act), torch.stack(rew))

    def sample_iql_batch(self, tasks, z: torch.Tensor) -> Batch:
        per = max(1, self.cfg.iql_batch // len(tasks))
        parts = []
        for j, i in enumerate(tasks):
            b = self.buffers[i]
            idx = torch.as_tensor(self.rng.integers(0, len(b), per))
            parts.append((b.s[idx], b.a[idx], b.r[idx], b.sp[idx], b.done[idx], z[j].expand(per, -1)))
        s, a, r, sp, done, zz = (torch.cat(x) for x in zip(*parts))
        wm = self.model.wm
        return Batch(wm.phi(s), a, r, wm.phi(sp), done, zz.detach())

    # -- updates ------------------------------------------------------------------

    def wm_iteration(self) -> tuple[np.ndarray, torch.Tensor]:
        tasks = self._tasks()
        rep = self.wm_trainer.step(self.sample_meta_batch(tasks))
        if self.step % self.cfg.log_every == 0:
            self.wm_rows.append([self.step, rep.tc, rep.consistency, rep.reward_mse, rep.contrastive])
        return tasks, rep.z

    def iql_iteration(self, tasks, z: torch.Tensor) -> None:
        out = self.model.agent.update(self.sample_iql_batch(tasks, z))
        if self.step % self.cfg.log_every == 0:
            self.iql_rows.append([self.step, out["v"], out["q"], out["pi"], out["adv"], out["weight"]])

    @torch.no_grad()
    def frozen_z(self, tasks) -> torch.Tensor:
        return encode_context(self.model.encoder, self._contexts(tasks))

    def fit(self, callback: Callable[["SpcTrainer"], None] | None = None) -> SpcModel:
        cfg = self.cfg
        if cfg.schedule == "interleaved":
            for _ in range(cfg.iterations):
                tasks, z = self.wm_iteration()
                self.iql_iteration(tasks, z)
                self.step += 1
                if callback:
                    callback(self)
        else:
            for _ in range(cfg.iterations):
                self.wm_iteration()
                self.step += 1
                if callback:
                    callback(self)
            for _ in range(cfg.iql_iterations or cfg.iterations):
                tasks = self._tasks()
                self.iql_iteration(tasks, self.frozen_z(tasks))
                self.step += 1
                if callback:
                    callback(self)
        return self.model


def train(datasets: Sequence[TaskDataset], cfg: TrainConfig, seed: int = 0) -> SpcTrainer:
    trainer = SpcTrainer(datasets, cfg, seed)
    trainer.fit()
    return trainer


# --- meta-test protocols -------------------------------------------------------------


class RunningMean:
    """Exact running mean of task embeddings; zero before the first update."""

    def __init__(self, dim: int) -> None:
        self.value = torch.zeros(dim)
        self.count = 0

    def add(self, e: torch.Tensor) -> None:
        self.count += 1
        self.value = self.value + (e - self.value) / self.count


@dataclass
class EpisodeResult:
    task_id: int
    protocol: str
    k: int
    episode: int
    ret: float
    success: bool

    def row(self) -> list:
        return [self.task_id, self.protocol, self.k, self.episode, self.ret, int(self.success)]


def _eval_rng(spec: TaskSpec, seed: int, tag: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, seed, tag, episode])


def run_episode(
    model: SpcModel,
    spec: TaskSpec,
    env_rng: np.random.Generator,
    z: torch.Tensor | None = None,
    running: RunningMean | None = None,
    deterministic: bool = True,
    generator: torch.Generator | None = None,
    trace: list | None = None,
) -> tuple[float, bool]:
    """Roll out one episode.

    With ``running`` given, the policy acts on its current mean and every
    transition is folded into it; otherwise ``z`` stays fixed.
    """
    fam = envs.get_family(spec.family)
    s = envs.reset(spec, env_rng)
    total = 0.0
    for _ in range(spec.episode_length):
        zt = running.value if running is not None else z
        a = model.act(s, zt, deterministic, generator)
        sp, r, done = envs.step(spec, s, a, env_rng)
        if trace is not None:
            trace.append((zt.clone(), a))
        if running is not None:
            running.add(model.embed(s, a, r, sp))
        total += r
        s = sp
        if done:
            break
    return total, fam.success(spec, s)


def zero_shot_eval(model: SpcModel, spec: TaskSpec, episodes: int, seed: int = 0,
                   task_id: int = 0, deterministic: bool = True) -> list[EpisodeResult]:
    out = []
    for ep in range(episodes):
        running = RunningMean(model.z_dim)
        gen = torch.Generator().manual_seed(seed * 100_003 + ep)
        ret, ok = run_episode(model, spec, _eval_rng(spec, seed, 1, ep), running=running,
                              deterministic=deterministic, generator=gen)
        out.append(EpisodeResult(task_id, "zero", 0, ep, ret, ok))
    return out


def adapt(model: SpcModel, spec: TaskSpec, k: int, seed: int = 0, deterministic: bool = False) -> torch.Tensor:
    """Collect ``k`` trajectories with online z updates and return the mean embedding."""
    running = RunningMean(model.z_dim)
    gen = torch.Generator().manual_seed(seed)
    for j in range(k):
        run_episode(model, spec, _eval_rng(spec, seed, 2, j), running=running,
                    deterministic=deterministic, generator=gen)
    return running.value


def frozen_eval(model: SpcModel, spec: TaskSpec, z: torch.Tensor, episodes: int, seed: int = 0,
                task_id: int = 0, k: int = 0, protocol: str = "few") -> list[EpisodeResult]:
    out = []
    for ep in range(episodes):
        ret, ok = run_episode(model, spec, _eval_rng(spec, seed, 3, ep), z=z, deterministic=True)
        out.append(EpisodeResult(task_id, protocol, k, ep, ret, ok))
    return out


def few_shot_eval(model: SpcModel, spec: TaskSpec, k: int, episodes: int, seed: int = 0,
                  task_id: int = 0, adapt_deterministic: bool = False) -> list[EpisodeResult]:
    if k < 0:
        raise ConfigError("k must be non-negative")
    z = adapt(model, spec, k, seed, adapt_deterministic)
    return frozen_eval(model, spec, z, episodes, seed, task_id, k, "few")


def reference_returns(spec: TaskSpec, episodes: int, seed: int = 0) -> tuple[float, float]:
    """Mean returns of the scripted expert and of a uniform-random policy."""
    fam = envs.get_family(spec.family)
    expert, rand = [], []
    for ep in range(episodes):
        rng = _eval_rng(spec, seed, 3, ep)
        s = envs.reset(spec, rng)
        total = 0.0
        for _ in range(spec.episode_length):
            s, r, _ = envs.step(spec, s, fam.expert(spec, s), rng)
            total += r
        expert.append(total)
        rng = _eval_rng(spec, seed, 4, ep)
        prng = np.random.default_rng([seed, ep, 5])
        s = envs.reset(spec, rng)
        total = 0.0
        for _ in range(spec.episode_length):
            s, r, _ = envs.step(spec, s, prng.uniform(-1, 1, fam.act_dim), rng)
            total += r
        rand.append(total)
    return float(np.mean(expert)), float(np.mean(rand))


def normalized_score(ret: float, expert: float, random: float) -> float:
    return (ret - random) / (expert - random)


# --- representation tables -----------------------------------------------------------


@torch.no_grad()
def representation_tables(
    model: SpcModel, datasets: Sequence[TaskDataset], contexts_per_task: int = 10,
    context_size: int = 64, seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Context-encoder activations and (factor, z) rows for representation metrics.

    Returns ``(activations, factors, z, factor_names)`` where activations are
    last-hidden-layer outputs on individual context transitions and each
    factor/z row corresponds to one sampled context set.
    """
    rng = np.random.default_rng(seed)
    acts, facs, zs = [], [], []
    names = sorted(datasets[0].spec.factors)
    for ds in datasets:
        buf = TaskBuffer(ds, 1)
        for _ in range(contexts_per_task):
            ctx = buf.context_inputs[rng.integers(0, len(buf), context_size)]
            acts.append(model.encoder.hidden(ctx).double().numpy())
            zs.append(encode_context(model.encoder, ctx).double().numpy())
            facs.append([ds.spec.factors[n] for n in names])
    return np.concatenate(acts), np.asarray(facs, dtype=np.float64), np.asarray(zs), names


# --- timing --------------------------------------------------------------------------


def measure_timing(datasets: Sequence[TaskDataset], cfg: TrainConfig, train_steps: int = 50,
                   test_steps: int = 200, seed: int = 0) -> list[list]:
    """Steps per second for training updates and for test-time interaction."""
    trainer = SpcTrainer(datasets, cfg, seed)
    rows = []

    def clock(name, n, fn):
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        dt = time.perf_counter() - t0
        rows.append([name, n, dt, n / dt if dt > 0 else float("inf")])

    def full():
        tasks, z = trainer.wm_iteration()
        trainer.iql_iteration(tasks, z)

    clock("train_iteration", train_steps, full)
    clock("world_model_update", train_steps, trainer.wm_iteration)
    tasks = trainer._tasks()
    z = trainer.frozen_z(tasks)
    clock("iql_update", train_steps, lambda: trainer.iql_iteration(tasks, z))

    model = trainer.model
    spec = datasets[0].spec
    rng = np.random.default_rng(seed)
    state = {"s": envs.reset(spec, rng), "run": RunningMean(model.z_dim)}

    def test_step():
        a = model.act(state["s"], state["run"].value)
        sp, r, _ = envs.step(spec, state["s"], a, rng)
        state["run"].add(model.embed(state["s"], a, r, sp))
        state["s"] = sp

    clock("test_step", test_steps, test_step)
    return rows


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_json(), sort_keys=True)
