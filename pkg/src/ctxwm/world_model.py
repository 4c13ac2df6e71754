"""Task-conditioned latent world model trained by multi-step temporal consistency."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .context import ContextEncoder, PositiveBank, encode_context, focal_loss, infonce_loss
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .fsq import FsqConfig, onehot_to_values, quantize
from .nn import Adam, Ema, Mlp, backward, named_params

log = logging.getLogger(__name__)

# representation x consistency loss; "discrete-ce" is the default formulation
LATENT_MODES = (
    "discrete-ce",
    "discrete-mse",
    "discrete-cosine",
    "continuous-mse",
    "continuous-cosine",
    "simnorm-mse",
    "simnorm-cosine",
)
SIMNORM_GROUP = 8


def _split_mode(mode: str) -> tuple[str, str]:
    if mode not in LATENT_MODES:
        raise ConfigError(f"unknown latent mode {mode!r}; choose from {LATENT_MODES}")
    rep, loss = mode.split("-")
    return rep, loss


def simnorm(x: torch.Tensor, group: int = SIMNORM_GROUP) -> torch.Tensor:
    shape = x.shape
    return torch.softmax(x.reshape(*shape[:-1], -1, group), dim=-1).reshape(shape)


class WorldModel(nn.Module):
    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        z_dim: int,
        latent_dim: int = 64,
        fsq_levels: Sequence[int] = (5, 3),
        enc_hidden: Sequence[int] = (128,),
        dyn_hidden: Sequence[int] = (128, 128),
        latent_mode: str = "discrete-ce",
        ema_momentum: float = 0.005,
    ) -> None:
        super().__init__()
        self.rep, self.consistency = _split_mode(latent_mode)
        self.latent_mode = latent_mode
        if self.rep == "simnorm" and latent_dim % SIMNORM_GROUP:
            raise ConfigError(f"simnorm latents need a multiple of {SIMNORM_GROUP} dims")
        self.obs_dim, self.act_dim, self.z_dim = obs_dim, act_dim, z_dim
        self.fsq = FsqConfig(tuple(fsq_levels), latent_dim)
        self.latent_dim = latent_dim
        self.encoder = Mlp([obs_dim, *enc_hidden, latent_dim])
        self.encoder_target = copy.deepcopy(self.encoder)
        self.ema = Ema(self.encoder_target, ema_momentum)
        head_in = latent_dim + act_dim + z_dim
        dyn_out = self.fsq.positions * self.fsq.codebook_size if self.consistency == "ce" else latent_dim
        self.dynamics = Mlp([head_in, *dyn_hidden, dyn_out])
        self.reward = Mlp([head_in, *dyn_hidden, 1])

    @property
    def categorical(self) -> bool:
        return self.consistency == "ce"

    def latent(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Map encoder output to the latent state (values, codes)."""
        if self.rep == "discrete":
            return quantize(x, self.fsq)
        if self.rep == "simnorm":
            return simnorm(x), None
        return x, None

    def encode_obs(self, s: torch.Tensor, target: bool = False):
        """``(x, c, code)`` for observations; the target path is gradient-free."""
        s = torch.as_tensor(s, dtype=next(self.encoder.parameters()).dtype)
        if s.shape[-1] != self.obs_dim:
            raise DimensionError(f"observation width {s.shape[-1]} != {self.obs_dim}")
        if target:
            with torch.no_grad():
                x = self.encoder_target(s)
                c, code = self.latent(x)
            return x, c, code
        x = self.encoder(s)
        c, code = self.latent(x)
        return x, c, code

    @torch.no_grad()
    def phi(self, s: torch.Tensor) -> torch.Tensor:
        """Hard latent state for downstream RL (no gradient)."""
        return self.encode_obs(s)[1].detach()

    def _head_input(self, c, a, z) -> torch.Tensor:
        return torch.cat([c, torch.as_tensor(a, dtype=c.dtype), z], dim=-1)

    def predict_dynamics(self, c, a, z) -> torch.Tensor:
        """Categorical mode: logits ``(..., d', K)``; otherwise the next latent pre-activation."""
        out = self.dynamics(self._head_input(c, a, z))
        if self.categorical:
            return out.reshape(*out.shape[:-1], self.fsq.positions, self.fsq.codebook_size)
        return out

    def predict_reward(self, c, a, z) -> torch.Tensor:
        return self.reward(self._head_input(c, a, z)).squeeze(-1)

    def update_target(self) -> None:
        self.ema.update(self.encoder)


def gumbel_noise(shape, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator).clamp_(1e-10, 1.0 - 1e-7)
    return -torch.log(-torch.log(u))


def sample_next_code(
    logits: torch.Tensor,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight-through Gumbel-Softmax over the last axis.

    Returns hard code indices and a one-hot tensor whose forward value is the
    hard sample and whose gradient is that of the tempered softmax.
    """
    if temperature <= 0:
        raise ConfigError(f"Gumbel-Softmax temperature must be positive, got {temperature}")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator)
    soft = torch.softmax((logits + noise) / temperature, dim=-1)
    idx = soft.argmax(dim=-1)
    hard = F.one_hot(idx, logits.shape[-1]).to(soft.dtype)
    return idx, hard - soft.detach() + soft


@dataclass
class TcLossBreakdown:
    total: torch.Tensor
    consistency: list[torch.Tensor]
    reward: list[torch.Tensor]
    weights: list[float]

    @property
    def consistency_mean(self) -> float:
        return float(sum(float(c.detach()) for c in self.consistency) / len(self.consistency))

    @property
    def reward_mean(self) -> float:
        return float(sum(float(r.detach()) for r in self.reward) / len(self.reward))


def discount_weights(horizon: int, gamma: float) -> list[float]:
    return [gamma**h for h in range(horizon)]


def tc_loss(
    wm: WorldModel,
    obs: torch.Tensor,
    actions: torch.Tensor,
    rewards: torch.Tensor,
    z: torch.Tensor,
    horizon: int = 5,
    gamma: float = 0.99,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    consistency_coef: float = 1.0,
    reward_coef: float = 1.0,
) -> TcLossBreakdown:
    """Multi-step temporal-consistency loss on a batch of segments.

    ``obs`` is ``(B, >=H+1, obs_dim)``, ``actions`` ``(B, >=H, act_dim)``,
    ``rewards`` ``(B, >=H)``, ``z`` ``(B, z_dim)``. Cross-entropy is summed
    over code positions and averaged over the batch.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if obs.shape[1] < horizon + 1 or actions.shape[1] < horizon or rewards.shape[1] < horizon:
        raise ContractError(f"segment shorter than horizon {horizon}")
    c_hat, _ = wm.latent(wm.encoder(obs[:, 0]))
    cons, rew, weights = [], [], discount_weights(horizon, gamma)
    total = obs.new_zeros(())
    for h in range(horizon):
        a = actions[:, h]
        _, target, target_code = wm.encode_obs(obs[:, h + 1], target=True)
        pred = wm.predict_dynamics(c_hat, a, z)
        r_hat = wm.predict_reward(c_hat, a, z)
        r_err = ((r_hat - rewards[:, h]) ** 2).mean()
        if wm.categorical:
            ce = F.cross_entropy(pred.reshape(-1, pred.shape[-1]), target_code.reshape(-1), reduction="none")
            c_err = ce.reshape(pred.shape[0], -1).sum(-1).mean()
            _, onehot = sample_next_code(pred, temperature, generator)
            c_next = onehot_to_values(onehot, wm.fsq)
        else:
            c_next, _ = wm.latent(pred)
            if wm.consistency == "mse":
                c_err = ((c_next - target) ** 2).sum(-1).mean()
            else:
                c_err = (1.0 - F.cosine_similarity(c_next, target, dim=-1)).mean()
        cons.append(c_err)
        rew.append(r_err)
        total = total + weights[h] * (consistency_coef * c_err + reward_coef * r_err)
        c_hat = c_next
    return TcLossBreakdown(total, cons, rew, weights)


@dataclass
class WorldModelConfig:
    latent_dim: int = 64
    fsq_levels: tuple[int, ...] = (5, 3)
    enc_hidden: tuple[int, ...] = (128,)
    dyn_hidden: tuple[int, ...] = (128, 128)
    ctx_hidden: tuple[int, ...] = (64, 64)
    z_dim: int = 5
    z_bounding: str = "tanh"
    latent_mode: str = "discrete-ce"
    horizon: int = 5
    gamma: float = 0.99
    lr: float = 1e-4
    weight_decay: float = 1e-2
    ema_momentum: float = 0.005
    temperature: float = 1.0
    consistency_coef: float = 1.0
    reward_coef: float = 1.0
    beta: float = 1.0
    alpha: float = 1.0
    bank_momentum: float = 0.1
    contrastive: str = "infonce"
    grad_clip: float | None = None


@dataclass
class MetaBatch:
    """One meta-batch of per-task contexts and training segments.

    contexts: ``(N, n_ctx, in_dim)``; obs ``(N, B, H+1, obs_dim)``;
    actions ``(N, B, H, act_dim)``; rewards ``(N, B, H)``.
    """

    task_ids: list[int]
    contexts: torch.Tensor
    obs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor


@dataclass
class WmReport:
    tc: float
    consistency: float
    reward_mse: float
    contrastive: float
    z: torch.Tensor = field(repr=False)


class WorldModelTrainer:
    """Joint update of the context encoder and world model (plus positive bank)."""

    def __init__(
        self,
        wm: WorldModel,
        encoder: ContextEncoder,
        task_ids: Sequence[int],
        cfg: WorldModelConfig,
        generator: torch.Generator | None = None,
    ) -> None:
        if cfg.contrastive not in ("infonce", "focal", "none"):
            raise ConfigError(f"unknown contrastive objective {cfg.contrastive!r}")
        self.wm, self.encoder, self.cfg = wm, encoder, cfg
        self.generator = generator
        self.bank = PositiveBank(task_ids, encoder.z_dim, cfg.bank_momentum)
        self.contrastive_enabled = cfg.contrastive != "none" and len(task_ids) >= 2
        if cfg.contrastive != "none" and len(task_ids) < 2:
            log.warning("a single training task makes the contrastive objective degenerate; disabled")
        self.opt_wm = Adam(
            named_params("world_model", wm.encoder)
            + named_params("world_model.dynamics", wm.dynamics)
            + named_params("world_model.reward", wm.reward),
            lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip,
        )
        self.opt_ctx = Adam(
            named_params("context", encoder), lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip
        )

    def contrastive_loss(self, z: torch.Tensor, task_ids: Sequence[int]) -> torch.Tensor:
        if not self.contrastive_enabled:
            return z.new_zeros(())
        if self.cfg.contrastive == "focal":
            return focal_loss(z, task_ids)
        return infonce_loss(z, self.bank.get(task_ids), self.cfg.alpha)

    def step(self, batch: MetaBatch) -> WmReport:
        cfg = self.cfg
        n_tasks, n_seg = batch.obs.shape[:2]
        z = encode_context(self.encoder, batch.contexts)
        z_seg = z[:, None, :].expand(n_tasks, n_seg, z.shape[-1]).reshape(n_tasks * n_seg, -1)
        flat = lambda t: t.reshape(n_tasks * n_seg, *t.shape[2:])
        # per-task losses are batch means, so the sum over tasks is n_tasks * mean
        br = tc_loss(
            self.wm, flat(batch.obs), flat(batch.actions), flat(batch.rewards), z_seg,
            horizon=cfg.horizon, gamma=cfg.gamma, temperature=cfg.temperature,
            generator=self.generator, consistency_coef=cfg.consistency_coef, reward_coef=cfg.reward_coef,
        )
        l_tc = n_tasks * br.total
        l_con = self.contrastive_loss(z, batch.task_ids)
        loss = l_tc + cfg.beta * l_con
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite world-model loss: tc={float(l_tc)} contrastive={float(l_con)} "
                f"z range=({float(z.min())}, {float(z.max())})"
            )
        self.opt_wm.zero_grad()
        self.opt_ctx.zero_grad()
        backward(loss)
        self.opt_wm.step()
        self.opt_ctx.step()
        self.wm.update_target()
        self.bank.update(batch.task_ids, z)
        return WmReport(
            tc=float(l_tc.detach()), consistency=br.consistency_mean, reward_mse=br.reward_mean,
            contrastive=float(l_con.detach()) if torch.is_tensor(l_con) else float(l_con), z=z.detach(),
        )


def train_step(trainer: WorldModelTrainer, batch: MetaBatch) -> WmReport:
    return trainer.step(batch)


def uniform_ce(cfg: FsqConfig) -> float:
    """Per-step cross-entropy of a uniform categorical over every code position."""
    return cfg.positions * math.log(cfg.codebook_size)
