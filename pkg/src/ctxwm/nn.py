"""Neural-network primitives: pre-norm MLPs, Adam/AdamW, EMA tracking.

Reverse-mode differentiation itself is delegated to torch autograd; this
module fixes the network shapes and the update rules the rest of the
package relies on.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, DimensionError, NumericError

LAYERNORM_EPS = 1e-5


def mish(x: torch.Tensor) -> torch.Tensor:
    # softplus falls back to identity above 20 to avoid exp overflow
    return x * torch.tanh(F.softplus(x, beta=1.0, threshold=20.0))


class Mlp(nn.Module):
    """Stack of Linear -> LayerNorm -> Mish blocks followed by a plain Linear.

    LayerNorm is applied to every hidden linear output and never to the
    final layer. ``out_act`` is ``None`` (identity) or ``"tanh"``.
    """

    def __init__(
        self,
        dims: Sequence[int],
        layernorm: bool = True,
        out_act: str | None = None,
    ) -> None:
        super().__init__()
        if len(dims) < 2:
            raise DimensionError(f"an MLP needs at least input and output widths, got {list(dims)}")
        if any(int(d) <= 0 for d in dims):
            raise DimensionError(f"layer widths must be positive, got {list(dims)}")
        if out_act not in (None, "identity", "tanh"):
            raise ValueError(f"unsupported output activation {out_act!r}")
        self.dims = [int(d) for d in dims]
        self.use_layernorm = layernorm
        self.out_act = None if out_act == "identity" else out_act
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(self.dims[:-1], self.dims[1:]))
        n_hidden = len(self.dims) - 2
        self.norms = nn.ModuleList(
            nn.LayerNorm(d, eps=LAYERNORM_EPS) for d in self.dims[1:-1]
        ) if layernorm else nn.ModuleList()
        assert not layernorm or len(self.norms) == n_hidden

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Activations of the last hidden layer (the input itself for a 1-layer net)."""
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"expected last dim {self.in_dim}, got {tuple(x.shape)}")
        h = x
        for i, lin in enumerate(self.linears[:-1]):
            h = lin(h)
            if self.use_layernorm:
                h = self.norms[i](h)
            h = mish(h)
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.linears[-1](self.hidden(x))
        if self.out_act == "tanh":
            out = torch.tanh(out)
        return out


def forward_mlp(net: Mlp, x: torch.Tensor) -> torch.Tensor:
    return net(x)


def zero_(module: nn.Module) -> nn.Module:
    """Set every parameter to zero (LayerNorm gains included)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def backward(loss: torch.Tensor) -> None:
    """Back-propagate a scalar loss once.

    A second call on the same loss node is rejected even when torch would
    silently accept it (graphs with no saved tensors).
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_ctxwm_consumed", False):
        raise ContractError("loss already back-propagated; run the forward pass again")
    try:
        loss.backward()
    except RuntimeError as exc:
        raise ContractError(str(exc)) from exc
    loss._ctxwm_consumed = True


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``weight_decay > 0``).

    ``params`` is an iterable of ``(name, tensor)`` pairs so numeric failures
    can name the offending parameter.
    """

    def __init__(
        self,
        params: Iterable[tuple[str, torch.Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        grad_clip: float | None = None,
    ) -> None:
        self.params = [(n, p) for n, p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.exp_avg = [torch.zeros_like(p) for _, p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        grads = []
        for name, p in self.params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
            grads.append(g)
        if not grads:
            return
        # one fused norm serves both the finiteness check and clipping
        total = float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads))))
        if not math.isfinite(total):
            bad = next(n for (n, _), g in zip(self.params, grads) if not torch.isfinite(g).all())
            raise NumericError(f"non-finite gradient in parameter {bad}")
        if self.grad_clip is not None and total > self.grad_clip:
            grads = torch._foreach_mul(grads, self.grad_clip / (total + 1e-12))
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        ps = [p for _, p in self.params]
        if self.weight_decay:
            torch._foreach_mul_(ps, 1.0 - self.lr * self.weight_decay)
        torch._foreach_lerp_(self.exp_avg, grads, 1.0 - self.beta1)
        torch._foreach_mul_(self.exp_avg_sq, self.beta2)
        torch._foreach_addcmul_(self.exp_avg_sq, grads, grads, value=1.0 - self.beta2)
        denom = torch._foreach_div(self.exp_avg_sq, bc2)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, self.eps)
        torch._foreach_addcdiv_(ps, self.exp_avg, denom, value=-self.lr / bc1)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"step": torch.tensor([float(self.step_count)])}
        for (name, _), m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out


def adamw_step(opt: Adam) -> None:
    opt.step()


class Ema:
    """Shadow copy updated as ``shadow <- m * live + (1 - m) * shadow``."""

    def __init__(self, shadow: nn.Module, momentum: float = 0.005) -> None:
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"EMA momentum must lie in (0, 1), got {momentum}")
        self.shadow = shadow
        self.momentum = momentum
        for p in shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, live: nn.Module) -> None:
        live_params = dict(live.named_parameters())
        for name, sp in self.shadow.named_parameters():
            lp = live_params.get(name)
            if lp is None or lp.shape != sp.shape:
                raise DimensionError(f"EMA shadow parameter {name} does not match the live module")
            # lerp form keeps shadow == live an exact fixed point
            sp.lerp_(lp, self.momentum)


def ema_update(tracker: Ema, live: nn.Module) -> None:
    tracker.update(live)


def named_params(prefix: str, module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]
