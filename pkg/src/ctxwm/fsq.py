"""Finite scalar quantization with straight-through gradients.

A latent of width ``d`` is split into ``b = len(levels)`` channels using a
blocked layout: channel ``i`` owns the contiguous slice
``x[..., i*d' : (i+1)*d']`` with ``d' = d / b``. Each position ``p`` of the
``d'`` positions therefore carries one value per channel, and those values
are packed into a single joint code with channel 0 as the fastest digit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class FsqConfig:
    levels: tuple[int, ...] = (5, 3)
    dim: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        if not self.levels:
            raise ConfigError("FSQ needs at least one channel")
        for l in self.levels:
            if l < 3 or l % 2 == 0:
                raise ConfigError(f"FSQ levels must be odd and >= 3, got {self.levels}")
        if self.dim <= 0 or self.dim % len(self.levels):
            raise ConfigError(f"latent dim {self.dim} is not divisible by {len(self.levels)} channels")

    @property
    def channels(self) -> int:
        return len(self.levels)

    @property
    def positions(self) -> int:
        return self.dim // len(self.levels)

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels))

    @property
    def half(self) -> tuple[int, ...]:
        return tuple(l // 2 for l in self.levels)

    @cached_property
    def code_table(self) -> torch.Tensor:
        """Grid values for every joint code, shape ``(K, b)``."""
        idx = np.arange(self.codebook_size)
        cols = []
        for l, h in zip(self.levels, self.half):
            cols.append(idx % l - h)
            idx = idx // l
        return torch.tensor(np.stack(cols, axis=1), dtype=torch.float32)


def to_channels(x: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """(..., d) -> (..., d', b) under the blocked layout."""
    if x.shape[-1] != cfg.dim:
        raise DimensionError(f"expected latent width {cfg.dim}, got {x.shape[-1]}")
    return x.reshape(*x.shape[:-1], cfg.channels, cfg.positions).transpose(-1, -2)


def from_channels(v: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """(..., d', b) -> (..., d)."""
    return v.transpose(-1, -2).reshape(*v.shape[:-2], cfg.dim)


def _half_tensor(cfg: FsqConfig, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(cfg.half, dtype=like.dtype, device=like.device)


def bound(x: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """Pre-rounding surrogate ``floor(L/2) * tanh(x)`` in channel form."""
    return _half_tensor(cfg, x) * torch.tanh(to_channels(x, cfg))


def quantize(x: torch.Tensor, cfg: FsqConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(values, codes)``.

    ``values`` has the shape of ``x`` and carries straight-through gradients
    (rounding is treated as the identity). ``codes`` has shape ``(..., d')``.
    """
    surrogate = bound(x, cfg)
    grid = torch.round(surrogate)
    values = surrogate + (grid - surrogate).detach()
    return from_channels(values, cfg), pack(grid.detach(), cfg)


def pack(grid: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """Channel grid values (..., d', b) -> joint codes (..., d')."""
    digits = grid.round().long() + torch.tensor(cfg.half, device=grid.device)
    code = torch.zeros(digits.shape[:-1], dtype=torch.long, device=grid.device)
    radix = 1
    for i, l in enumerate(cfg.levels):
        code = code + digits[..., i] * radix
        radix *= l
    return code


def decode(codes: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """Joint codes (..., d') -> grid values (..., d)."""
    codes = torch.as_tensor(codes)
    if codes.shape[-1:] != (cfg.positions,):
        raise DimensionError(f"expected {cfg.positions} code positions, got {tuple(codes.shape)}")
    if codes.numel() and (int(codes.min()) < 0 or int(codes.max()) >= cfg.codebook_size):
        raise ValueError(f"code index outside [0, {cfg.codebook_size})")
    return from_channels(cfg.code_table[codes.long()], cfg)


def onehot_to_values(onehot: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """(Relaxed) one-hot codes (..., d', K) -> latent values (..., d); differentiable."""
    table = cfg.code_table.to(dtype=onehot.dtype, device=onehot.device)
    return from_channels(onehot @ table, cfg)


def codes_to_bytes(codes: torch.Tensor | np.ndarray) -> bytes:
    arr = np.asarray(codes)
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
        raise ValueError("codes do not fit in uint16")
    return arr.astype("<u2").tobytes()


def codes_from_bytes(raw: bytes, positions: int) -> np.ndarray:
    return np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(-1, positions)
