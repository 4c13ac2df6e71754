"""Context encoder, task representations and the contrastive objective."""

from __future__ import annotations

import logging
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, RegistryError
from .fsq import FsqConfig, quantize
from .nn import Mlp

log = logging.getLogger(__name__)

BOUNDINGS = ("tanh", "identity", "l2", "fsq")


class ContextEncoder(nn.Module):
    """Per-transition encoder ``(s, a, r, s') -> z``; task representation is the mean.

    ``bounding`` selects how the per-transition output is squashed before
    averaging: ``tanh`` (default), ``identity``, ``l2`` normalisation or
    ``fsq`` quantization.
    """

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        z_dim: int = 5,
        hidden: Sequence[int] = (64, 64),
        bounding: str = "tanh",
        fsq_levels: Sequence[int] = (5, 3),
    ) -> None:
        super().__init__()
        if bounding not in BOUNDINGS:
            raise ConfigError(f"unknown z bounding {bounding!r}; choose from {BOUNDINGS}")
        self.obs_dim, self.act_dim, self.z_dim = obs_dim, act_dim, z_dim
        self.bounding = bounding
        self.net = Mlp([self.in_dim, *hidden, z_dim])
        self.fsq = None
        if bounding == "fsq":
            # one channel so any z_dim divides evenly
            self.fsq = FsqConfig((int(fsq_levels[0]),), z_dim)

    @property
    def in_dim(self) -> int:
        return 2 * self.obs_dim + self.act_dim + 1

    def _bound(self, out: torch.Tensor) -> torch.Tensor:
        if self.bounding == "tanh":
            return torch.tanh(out)
        if self.bounding == "l2":
            return F.normalize(out, dim=-1)
        if self.bounding == "fsq":
            values, _ = quantize(out, self.fsq)
            return values / max(self.fsq.half)
        return out

    def forward(self, transitions: torch.Tensor) -> torch.Tensor:
        """Per-transition embeddings, shape ``(..., z_dim)``."""
        if transitions.shape[-1] != self.in_dim:
            raise DimensionError(
                f"context encoder expects {self.in_dim} features (s, a, r, s'), got {transitions.shape[-1]}"
            )
        return self._bound(self.net(transitions))

    def hidden(self, transitions: torch.Tensor) -> torch.Tensor:
        return self.net.hidden(transitions)


def pack_transitions(s, a, r, sp) -> torch.Tensor:
    """Concatenate ``(s, a, r, s')`` into encoder inputs."""
    s, a, r, sp = (torch.as_tensor(v, dtype=torch.float32) for v in (s, a, r, sp))
    return torch.cat([s, a, r.unsqueeze(-1), sp], dim=-1)


def encode_context(encoder: ContextEncoder, context: torch.Tensor) -> torch.Tensor:
    """Task representation(s) from context transitions.

    ``context`` is ``(n, in_dim)`` for one task or ``(tasks, n, in_dim)`` for
    a batch. An empty context yields the zero vector.
    """
    if context.shape[-2] == 0:
        return torch.zeros(*context.shape[:-2], encoder.z_dim)
    return encoder(context).mean(dim=-2)


def similarity(za: torch.Tensor, zb: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    if alpha <= 0:
        raise ConfigError(f"similarity temperature must be positive, got {alpha}")
    return torch.exp(-((za - zb) ** 2).sum(-1) / alpha)


def infonce_loss(z: torch.Tensor, positives: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """``-sum_i log S(z_i, p_i) / sum_j S(z_i, p_j)`` with the positives held constant."""
    if alpha <= 0:
        raise ConfigError(f"similarity temperature must be positive, got {alpha}")
    if z.shape != positives.shape:
        raise DimensionError(f"z {tuple(z.shape)} and positives {tuple(positives.shape)} differ")
    if z.shape[0] < 2:
        log.warning("InfoNCE with a single task is identically zero")
    positives = positives.detach()
    logits = -((z[:, None, :] - positives[None, :, :]) ** 2).sum(-1) / alpha
    return -torch.diagonal(torch.log_softmax(logits, dim=1)).sum()


def focal_loss(z: torch.Tensor, task_ids: Sequence[int], beta: float = 1.0, eps0: float = 0.1) -> torch.Tensor:
    """Distance-metric objective: pull same-task z together, push others apart."""
    ids = torch.as_tensor(list(task_ids))
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    same = (ids[:, None] == ids[None, :]).float()
    off = 1.0 - torch.eye(len(ids))
    loss = same * off * d2 + (1.0 - same) * beta / (d2 + eps0)
    return loss.sum() / max(1, len(ids) * (len(ids) - 1))


class PositiveBank:
    """Moving-average task representations used as InfoNCE positives."""

    def __init__(self, task_ids: Sequence[int], z_dim: int, momentum: float = 0.1) -> None:
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"bank momentum must lie in (0, 1], got {momentum}")
        self.momentum = momentum
        self.index = {int(t): i for i, t in enumerate(task_ids)}
        self.entries = torch.zeros(len(self.index), z_dim)

    def _rows(self, task_ids: Sequence[int]) -> list[int]:
        try:
            return [self.index[int(t)] for t in task_ids]
        except KeyError as exc:
            raise RegistryError(f"task {exc.args[0]} is not registered in the positive bank") from None

    def get(self, task_ids: Sequence[int]) -> torch.Tensor:
        return self.entries[self._rows(task_ids)].clone()

    @torch.no_grad()
    def update(self, task_ids: Sequence[int], z: torch.Tensor) -> None:
        rows = self._rows(task_ids)
        lam = self.momentum
        for r, zi in zip(rows, z.detach()):
            self.entries[r] = lam * zi + (1.0 - lam) * self.entries[r]


def update_bank(bank: PositiveBank, task_ids: Sequence[int], z: torch.Tensor) -> PositiveBank:
    bank.update(task_ids, z)
    return bank
