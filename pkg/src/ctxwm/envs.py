"""Toy meta-task families and offline dataset generation.

Families
--------
point-mass-direction
    2-D point mass starting uniformly in ``[-1.5, 1.5]^2``, ``p' = clip(p + 0.1 a)``;
    the goal sits at unit distance in
    direction ``theta`` and the reward is ``-|p' - goal|``. Reward-only variation.
point-mass-goal-speed
    Same body with velocity in the observation; reward ``-|v'_x - speed|``.
    Reward-only variation.
chain-gridworld-slip
    Chain of cells with one-hot observations. A non-negative action moves
    right, a negative one moves left, and with probability ``slip`` the move is
    reversed. Reward 1 on entering the right-most cell. Dynamics-only variation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError

STEP_SIZE = 0.1
ARENA = 2.0
GOAL_RADIUS = 1.0
SUCCESS_TOL = 0.1
START_SPREAD = 1.5
QUALITY_EPS = {"random": 1.0, "medium": 0.3, "expert": 0.05}

Ranges = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class TaskSpec:
    family: str
    factors: Mapping[str, float]
    episode_length: int = 100
    seed: int = 0
    options: Mapping[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "factors": dict(self.factors),
            "episode_length": self.episode_length,
            "seed": self.seed,
            "options": dict(self.options),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TaskSpec":
        return cls(d["family"], dict(d["factors"]), int(d["episode_length"]), int(d["seed"]), dict(d.get("options", {})))


@dataclass(frozen=True)
class Family:
    name: str
    factor: str
    train_ranges: Ranges
    ood_ranges: Ranges
    obs_dim: Callable[[TaskSpec], int]
    act_dim: int
    reset: Callable[[TaskSpec, np.random.Generator], np.ndarray]
    step: Callable[[TaskSpec, np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, float, bool]]
    expert: Callable[[TaskSpec, np.ndarray], np.ndarray]
    success: Callable[[TaskSpec, np.ndarray], bool]


# --- point mass, direction ----------------------------------------------------

def _goal(spec: TaskSpec) -> np.ndarray:
    th = spec.factors["theta"]
    return GOAL_RADIUS * np.array([math.cos(th), math.sin(th)])


def _pm_reset(spec, rng):
    return rng.uniform(-0.1, 0.1, size=2)


def _pm_dir_reset(spec, rng):
    # starts spread over the arena so every task's data visits both goal regions
    return rng.uniform(-START_SPREAD, START_SPREAD, size=2)


def _pm_dir_step(spec, state, action, rng):
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    nxt = np.clip(state + STEP_SIZE * a, -ARENA, ARENA)
    return nxt, -float(np.linalg.norm(nxt - _goal(spec))), False


def _pm_dir_expert(spec, state):
    return np.clip((_goal(spec) - state) / STEP_SIZE, -1.0, 1.0)


def _pm_dir_success(spec, state):
    return bool(np.linalg.norm(state - _goal(spec)) < SUCCESS_TOL)


# --- point mass, goal speed ---------------------------------------------------

def _pm_speed_reset(spec, rng):
    return np.concatenate([rng.uniform(-0.1, 0.1, size=2), np.zeros(2)])


def _pm_speed_step(spec, state, action, rng):
    v = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    p = np.clip(state[:2] + STEP_SIZE * v, -10 * ARENA, 10 * ARENA)
    return np.concatenate([p, v]), -abs(float(v[0]) - spec.factors["speed"]), False


def _pm_speed_expert(spec, state):
    return np.array([np.clip(spec.factors["speed"], -1.0, 1.0), 0.0])


def _pm_speed_success(spec, state):
    return bool(abs(state[2] - spec.factors["speed"]) < SUCCESS_TOL)


# --- chain gridworld ------------------------------------------------------------

def _n_cells(spec) -> int:
    return int(spec.options.get("n_cells", 7))


def _chain_reset(spec, rng):
    obs = np.zeros(_n_cells(spec))
    obs[0] = 1.0
    return obs


def _chain_move(spec, cell: int, action: float, u: float) -> int:
    direction = 1 if action >= 0 else -1
    if u < spec.factors["slip"]:
        direction = -direction
    return int(min(max(cell + direction, 0), _n_cells(spec) - 1))


def _chain_step(spec, state, action, rng):
    n = _n_cells(spec)
    u = rng.random()
    cell = _chain_move(spec, int(np.argmax(state)), float(np.asarray(action).reshape(-1)[0]), u)
    obs = np.zeros(n)
    obs[cell] = 1.0
    return obs, float(cell == n - 1), False


def _chain_expert(spec, state):
    return np.array([1.0])


def _chain_success(spec, state):
    return bool(np.argmax(state) == _n_cells(spec) - 1)


PI = math.pi
FAMILIES: dict[str, Family] = {
    "point-mass-direction": Family(
        "point-mass-direction", "theta",
        train_ranges=((-PI, PI),),
        ood_ranges=((-1.5 * PI, -PI), (PI, 1.5 * PI)),
        obs_dim=lambda spec: 2, act_dim=2,
        reset=_pm_dir_reset, step=_pm_dir_step, expert=_pm_dir_expert, success=_pm_dir_success,
    ),
    "point-mass-goal-speed": Family(
        "point-mass-goal-speed", "speed",
        train_ranges=((-1.0, -0.6), (-0.2, 0.2), (0.6, 1.0)),
        ood_ranges=((-0.6, -0.2), (0.2, 0.6)),
        obs_dim=lambda spec: 4, act_dim=2,
        reset=_pm_speed_reset, step=_pm_speed_step, expert=_pm_speed_expert, success=_pm_speed_success,
    ),
    "chain-gridworld-slip": Family(
        "chain-gridworld-slip", "slip",
        train_ranges=((0.0, 0.3),),
        ood_ranges=((0.35, 0.5),),
        obs_dim=_n_cells, act_dim=1,
        reset=_chain_reset, step=_chain_step, expert=_chain_expert, success=_chain_success,
    ),
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown task family {name!r}; choose from {sorted(FAMILIES)}") from None


def reset(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    return get_family(spec.family).reset(spec, rng)


def step(spec: TaskSpec, state, action, rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
    return get_family(spec.family).step(spec, np.asarray(state, dtype=np.float64), action, rng)


def obs_dim(spec: TaskSpec) -> int:
    return get_family(spec.family).obs_dim(spec)


def act_dim(spec: TaskSpec) -> int:
    return get_family(spec.family).act_dim


# --- task sampling ---------------------------------------------------------------

def _overlaps(a: Ranges, b: Ranges) -> bool:
    return any(lo1 < hi2 and lo2 < hi1 for lo1, hi1 in a for lo2, hi2 in b)


def _draw(ranges: Ranges, rng: np.random.Generator) -> float:
    widths = np.array([hi - lo for lo, hi in ranges])
    k = rng.choice(len(ranges), p=widths / widths.sum())
    lo, hi = ranges[k]
    return float(rng.uniform(lo, hi))


def in_ranges(x: float, ranges: Ranges) -> bool:
    return any(lo <= x <= hi for lo, hi in ranges)


def sample_task_set(
    family: str,
    n_train: int,
    n_test_id: int,
    n_test_ood: int,
    seed: int,
    episode_length: int = 100,
    options: Mapping[str, int] | None = None,
    train_ranges: Ranges | None = None,
    ood_ranges: Ranges | None = None,
) -> dict[str, list[TaskSpec]]:
    fam = get_family(family)
    train_ranges = tuple(train_ranges or fam.train_ranges)
    ood_ranges = tuple(ood_ranges or fam.ood_ranges)
    if n_train <= 0:
        raise ConfigError("at least one training task is required")
    if n_test_id < 0 or n_test_ood < 0:
        raise ConfigError("test task counts must be non-negative")
    if _overlaps(train_ranges, ood_ranges):
        raise ConfigError(f"OOD ranges {ood_ranges} overlap training ranges {train_ranges}")
    rng = np.random.default_rng(seed)
    out: dict[str, list[TaskSpec]] = {"train": [], "test_id": [], "test_ood": []}
    for split, n, ranges in (("train", n_train, train_ranges), ("test_id", n_test_id, train_ranges),
                             ("test_ood", n_test_ood, ood_ranges)):
        for _ in range(n):
            value = _draw(ranges, rng)
            out[split].append(TaskSpec(family, {fam.factor: value}, episode_length,
                                       int(rng.integers(2**31)), dict(options or {})))
    return out


# --- datasets ----------------------------------------------------------------------

@dataclass
class TaskDataset:
    task_id: int
    spec: TaskSpec
    episode: np.ndarray
    t: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    sp: np.ndarray
    done: np.ndarray
    episode_quality: list[str]

    def __len__(self) -> int:
        return len(self.r)

    @property
    def n_episodes(self) -> int:
        return len(self.episode_quality)

    def episode_returns(self) -> np.ndarray:
        return np.bincount(self.episode, weights=self.r, minlength=self.n_episodes)


def env_rng(spec: TaskSpec, episode: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, episode, 0])


def behaviour_action(spec: TaskSpec, state, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Scripted expert with probability ``1 - eps``, uniform random otherwise."""
    fam = get_family(spec.family)
    explore = rng.random() < eps
    random_a = rng.uniform(-1.0, 1.0, size=fam.act_dim)
    return random_a if explore else np.asarray(fam.expert(spec, state), dtype=np.float64)


def quality_schedule(mix: Mapping[str, float], episodes: int) -> list[str]:
    unknown = set(mix) - set(QUALITY_EPS)
    if unknown:
        raise ConfigError(f"unknown behaviour qualities {sorted(unknown)}")
    if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ConfigError(f"quality mix must be non-negative and sum to 1, got {dict(mix)}")
    names = [q for q in QUALITY_EPS if mix.get(q, 0.0) > 0]
    counts = [int(round(mix[q] * episodes)) for q in names]
    if names:
        counts[-1] = episodes - sum(counts[:-1])
    return [q for q, n in zip(names, counts) for _ in range(max(n, 0))]


def generate_dataset(
    spec: TaskSpec,
    mix: Mapping[str, float],
    episodes: int,
    seed: int,
    task_id: int = 0,
) -> TaskDataset:
    if episodes <= 0:
        raise EmptyDatasetError("a dataset needs at least one episode")
    qualities = quality_schedule(mix, episodes)
    rows: dict[str, list] = {k: [] for k in ("episode", "t", "s", "a", "r", "sp", "done")}
    for ep, q in enumerate(qualities):
        erng = env_rng(spec, ep)
        prng = np.random.default_rng([seed, task_id, ep, 1])
        s = reset(spec, erng)
        for t in range(spec.episode_length):
            a = behaviour_action(spec, s, QUALITY_EPS[q], prng)
            sp, r, done = step(spec, s, a, erng)
            for k, v in zip(rows, (ep, t, s, a, r, sp, done)):
                rows[k].append(v)
            s = sp
            if done:
                break
    return TaskDataset(
        task_id=task_id, spec=spec,
        episode=np.asarray(rows["episode"], dtype=np.int64), t=np.asarray(rows["t"], dtype=np.int64),
        s=np.asarray(rows["s"]), a=np.asarray(rows["a"]), r=np.asarray(rows["r"], dtype=np.float64),
        sp=np.asarray(rows["sp"]), done=np.asarray(rows["done"], dtype=np.float64),
        episode_quality=qualities,
    )


def replay(ds: TaskDataset) -> tuple[np.ndarray, np.ndarray]:
    """Re-run the recorded actions through the dynamics with the recorded env streams."""
    sps, rs = [], []
    rng = None
    for i in range(len(ds)):
        if ds.t[i] == 0:
            rng = env_rng(ds.spec, int(ds.episode[i]))
            reset(ds.spec, rng)
        sp, r, _ = step(ds.spec, ds.s[i], ds.a[i], rng)
        sps.append(sp)
        rs.append(r)
    return np.asarray(sps), np.asarray(rs)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CTXWM_THREADS", "1")))
    except ValueError:
        raise ConfigError("CTXWM_THREADS must be a positive integer") from None


def generate_datasets(
    specs: Sequence[TaskSpec], mix: Mapping[str, float], episodes: int, seed: int
) -> list[TaskDataset]:
    """Generate per-task datasets, possibly in parallel; ordered by task id."""
    jobs = list(enumerate(specs))
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        return list(pool.map(lambda j: generate_dataset(j[1], mix, episodes, seed, task_id=j[0]), jobs))


def policy_return(spec: TaskSpec, policy: Callable[[np.ndarray], np.ndarray], episode: int) -> float:
    """Undiscounted return of a deterministic state-feedback policy for one episode."""
    rng = env_rng(spec, episode)
    s = reset(spec, rng)
    total = 0.0
    for _ in range(spec.episode_length):
        s, r, done = step(spec, s, policy(s), rng)
        total += r
        if done:
            break
    return total


def expert_return(spec: TaskSpec, episode: int) -> float:
    fam = get_family(spec.family)
    return policy_return(spec, lambda s: fam.expert(spec, s), episode)
