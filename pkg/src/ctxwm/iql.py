"""Implicit Q-learning over latent states conditioned on task representations."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
from torch import nn

from .errors import ConfigError, NumericError
from .nn import Adam, Ema, Mlp, backward, named_params

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class IqlConfig:
    expectile: float = 0.8
    temperature: float = 3.0
    gamma: float = 0.99
    lr: float = 3e-4
    target_momentum: float = 0.005
    weight_clip: float = 100.0
    hidden: tuple[int, ...] = (128, 128)
    num_q: int = 2

    def __post_init__(self) -> None:
        if not 0.0 < self.expectile < 1.0:
            raise ConfigError(f"expectile must lie in (0, 1), got {self.expectile}")
        if self.temperature <= 0:
            raise ConfigError(f"AWR temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"discount must lie in [0, 1), got {self.gamma}")


@dataclass
class Batch:
    c: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    c_next: torch.Tensor
    done: torch.Tensor
    z: torch.Tensor


def expectile_loss(x: torch.Tensor, tau: float) -> torch.Tensor:
    """Element-wise ``|tau - 1[x < 0]| * x**2``."""
    weight = (tau - (x < 0).to(x.dtype)).abs()
    return weight * x**2


def awr_weights(adv: torch.Tensor, temperature: float, clip: float = 100.0) -> torch.Tensor:
    return torch.exp(adv / temperature).clamp(max=clip)


class PolicyOptimizer(Protocol):
    """Offline-RL algorithm operating on ``(c, z)`` latent inputs."""

    def update(self, batch: Batch) -> dict[str, float]: ...

    def act(self, c: torch.Tensor, z: torch.Tensor, deterministic: bool = True,
            generator: torch.Generator | None = None) -> torch.Tensor: ...


class GaussianPolicy(nn.Module):
    """Diagonal Gaussian with tanh-squashed mean and a state-independent log-std."""

    def __init__(self, in_dim: int, act_dim: int, hidden: Sequence[int]) -> None:
        super().__init__()
        self.net = Mlp([in_dim, *hidden, act_dim], out_act="tanh")
        self.log_std = nn.Parameter(torch.zeros(act_dim))

    def dist(self, x: torch.Tensor) -> torch.distributions.Normal:
        mean = self.net(x)
        std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()
        return torch.distributions.Normal(mean, std.expand_as(mean))


class IqlAgent:
    def __init__(self, latent_dim: int, act_dim: int, z_dim: int, cfg: IqlConfig | None = None) -> None:
        self.cfg = cfg or IqlConfig()
        h = self.cfg.hidden
        self.act_dim = act_dim
        self.q = nn.ModuleList(Mlp([latent_dim + act_dim + z_dim, *h, 1]) for _ in range(self.cfg.num_q))
        self.q_target = copy.deepcopy(self.q)
        self.q_ema = Ema(self.q_target, self.cfg.target_momentum)
        self.v = Mlp([latent_dim + z_dim, *h, 1])
        self.policy = GaussianPolicy(latent_dim + z_dim, act_dim, h)
        lr = self.cfg.lr
        self.opt_v = Adam(named_params("v", self.v), lr=lr)
        self.opt_q = Adam(named_params("q", self.q), lr=lr)
        self.opt_pi = Adam(named_params("pi", self.policy), lr=lr)

    def modules(self) -> dict[str, nn.Module]:
        return {"q": self.q, "q_target": self.q_target, "v": self.v, "policy": self.policy}

    # -- evaluation helpers ---------------------------------------------------

    def q_values(self, c, a, z, target: bool = False) -> torch.Tensor:
        """Per-head Q values, shape ``(num_q, B)``."""
        heads = self.q_target if target else self.q
        x = torch.cat([c, a, z], dim=-1)
        return torch.stack([q(x).squeeze(-1) for q in heads])

    def value(self, c, z) -> torch.Tensor:
        return self.v(torch.cat([c, z], dim=-1)).squeeze(-1)

    # -- losses -----------------------------------------------------------------

    def value_loss(self, b: Batch) -> torch.Tensor:
        with torch.no_grad():
            q_t = self.q_values(b.c, b.a, b.z, target=True).min(0).values
        return expectile_loss(q_t - self.value(b.c, b.z), self.cfg.expectile).mean()

    def q_loss(self, b: Batch) -> torch.Tensor:
        with torch.no_grad():
            y = b.r + self.cfg.gamma * (1.0 - b.done) * self.value(b.c_next, b.z)
        qs = self.q_values(b.c, b.a, b.z)
        return ((qs - y[None]) ** 2).mean(1).sum()

    def advantage(self, b: Batch) -> torch.Tensor:
        with torch.no_grad():
            return self.q_values(b.c, b.a, b.z).min(0).values - self.value(b.c, b.z)

    def policy_loss(self, b: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        adv = self.advantage(b)
        w = awr_weights(adv, self.cfg.temperature, self.cfg.weight_clip)
        logp = self.policy.dist(torch.cat([b.c, b.z], dim=-1)).log_prob(b.a).sum(-1)
        return -(w * logp).mean(), adv, w

    # -- updates ----------------------------------------------------------------

    @staticmethod
    def _apply(opt: Adam, loss: torch.Tensor, what: str) -> None:
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite {what} loss")
        opt.zero_grad()
        backward(loss)
        opt.step()

    def value_update(self, b: Batch) -> float:
        loss = self.value_loss(b)
        self._apply(self.opt_v, loss, "value")
        return float(loss.detach())

    def q_update(self, b: Batch) -> float:
        loss = self.q_loss(b)
        self._apply(self.opt_q, loss, "Q")
        self.q_ema.update(self.q)
        return float(loss.detach())

    def policy_update(self, b: Batch) -> dict[str, float]:
        loss, adv, w = self.policy_loss(b)
        self._apply(self.opt_pi, loss, "policy")
        return {"pi": float(loss.detach()), "adv": float(adv.mean()), "weight": float(w.mean())}

    def update(self, b: Batch) -> dict[str, float]:
        lv = self.value_update(b)
        lq = self.q_update(b)
        out = self.policy_update(b)
        return {"v": lv, "q": lq, **out}

    @torch.no_grad()
    def act(self, c, z, deterministic: bool = True, generator: torch.Generator | None = None) -> torch.Tensor:
        dist = self.policy.dist(torch.cat([c, z], dim=-1))
        if deterministic:
            return dist.mean
        noise = torch.randn(dist.mean.shape, generator=generator)
        return (dist.mean + dist.stddev * noise).clamp(-1.0, 1.0)

    def state_tensors(self) -> dict[str, dict[str, torch.Tensor]]:
        return {name: m.state_dict() for name, m in self.modules().items()}

    def load_state_tensors(self, state: dict[str, dict[str, torch.Tensor]]) -> None:
        for name, m in self.modules().items():
            m.load_state_dict(state[name])


_UNIMPLEMENTED = {
    "cql": "conservative Q-learning",
    "td3bc": "TD3 with behaviour cloning",
}


def make_policy_optimizer(name: str, latent_dim: int, act_dim: int, z_dim: int, cfg: IqlConfig | None = None):
    """Factory for the offline-RL algorithm; only IQL ships with the package."""
    if name == "iql":
        return IqlAgent(latent_dim, act_dim, z_dim, cfg)
    if name in _UNIMPLEMENTED:
        raise NotImplementedError(
            f"{_UNIMPLEMENTED[name]} is not bundled; provide an object implementing PolicyOptimizer"
        )
    raise ConfigError(f"unknown policy optimizer {name!r}")

