"""Small shared training toys for the unit and acceptance suites."""

import math

import numpy as np
import torch

from ctxwm import envs
from ctxwm.harness import TrainConfig
from ctxwm.iql import Batch, IqlAgent, IqlConfig
from ctxwm.world_model import WorldModelConfig

from oracles import value_iteration

N_STATES = 5


def chain_mdp(n: int = N_STATES) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic chain; action 0 = left, 1 = right; reward 1 on entering the last cell."""
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    for s in range(n):
        for a, step in ((0, -1), (1, 1)):
            nxt = min(max(s + step, 0), n - 1)
            P[s, a, nxt] = 1.0
            R[s, a] = float(nxt == n - 1)
    return P, R


def chain_iql(max_steps: int = 20_000, check_every: int = 500, seed: int = 0, gamma: float = 0.9,
              target: float = 0.95) -> dict:
    """Train IQL on the chain seen through a frozen random encoder until the greedy policy reaches ``target``."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    P, R = chain_mdp()
    v_star = value_iteration(P, R, gamma)
    enc = torch.randn(N_STATES, 8)

    n = 4096
    s = rng.integers(0, N_STATES, n)
    a = rng.uniform(-1, 1, n)
    a_idx = (a >= 0).astype(int)
    sp = P[s, a_idx].argmax(1)
    r = R[s, a_idx]
    data = [torch.as_tensor(x, dtype=torch.float32) for x in (r, np.zeros(n))]
    c, cp = enc[torch.as_tensor(s)], enc[torch.as_tensor(sp)]
    act = torch.as_tensor(a, dtype=torch.float32)[:, None]
    z = torch.zeros(n, 1)

    agent = IqlAgent(8, 1, 1, IqlConfig(gamma=gamma, hidden=(64, 64), lr=1e-3))
    ratio, step = 0.0, 0
    for step in range(1, max_steps + 1):
        i = torch.as_tensor(rng.integers(0, n, 256))
        agent.update(Batch(c[i], act[i], data[0][i], cp[i], data[1][i], z[i]))
        if step % check_every == 0:
            greedy = agent.act(enc, torch.zeros(N_STATES, 1))[:, 0].numpy()
            pi = np.zeros((N_STATES, 2))
            pi[np.arange(N_STATES), (greedy >= 0).astype(int)] = 1.0
            v_pi = value_iteration(P, R, gamma, policy=pi)
            ratio = float(v_pi[0] / v_star[0])
            if ratio >= target:
                break
    return {"ratio": ratio, "steps": step, "v_star": float(v_star[0])}


def toy_datasets(family="point-mass-direction", factors=(0.0, math.pi), episodes=4, length=30, **options):
    fam = envs.get_family(family)
    specs = [envs.TaskSpec(family, {fam.factor: f}, length, 11 + i, options) for i, f in enumerate(factors)]
    return envs.generate_datasets(specs, {"medium": 1.0}, episodes, 0)


def tiny_cfg(**kw) -> TrainConfig:
    wm = WorldModelConfig(latent_dim=16, enc_hidden=(32,), dyn_hidden=(32,), ctx_hidden=(32,),
                          **kw.pop("wm", {}))
    return TrainConfig(meta_batch=2, context_size=16, segments_per_task=8, iql_batch=32, log_every=1,
                       wm=wm, iql=IqlConfig(hidden=(32,)), **kw)
