"""Independent reference computations used as test oracles.

Written in plain Python / numpy float64 without calling into the package's
own implementations of the quantity under test.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def mish_scalar(x: float) -> float:
    sp = x if x > 20 else math.log1p(math.exp(x))
    return x * math.tanh(sp)


def mlp_scalar(weights, biases, gains, shifts, x, out_tanh=False, eps=1e-5):
    """Linear -> LayerNorm -> Mish per hidden layer, then a plain Linear; pure Python."""
    h = [float(v) for v in x]
    n = len(weights)
    for k in range(n):
        W, b = weights[k], biases[k]
        y = [sum(W[i][j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))]
        if k < n - 1:
            mu = sum(y) / len(y)
            var = sum((v - mu) ** 2 for v in y) / len(y)
            y = [(v - mu) / math.sqrt(var + eps) * gains[k][i] + shifts[k][i] for i, v in enumerate(y)]
            y = [mish_scalar(v) for v in y]
        h = y
    return [math.tanh(v) for v in h] if out_tanh else h


def mlp_params(net):
    """Extract python-list parameters from an ``Mlp``."""
    W = [l.weight.detach().double().tolist() for l in net.linears]
    b = [l.bias.detach().double().tolist() for l in net.linears]
    g = [n.weight.detach().double().tolist() for n in net.norms]
    s = [n.bias.detach().double().tolist() for n in net.norms]
    return W, b, g, s


def mlp_np(net, x: np.ndarray) -> np.ndarray:
    """Vectorised float64 forward of an ``Mlp`` (rows of ``x``)."""
    h = np.asarray(x, dtype=np.float64)
    n = len(net.linears)
    for k, lin in enumerate(net.linears):
        h = h @ lin.weight.detach().double().numpy().T + lin.bias.detach().double().numpy()
        if k < n - 1:
            if net.use_layernorm:
                mu = h.mean(-1, keepdims=True)
                var = h.var(-1, keepdims=True)
                h = (h - mu) / np.sqrt(var + 1e-5)
                h = h * net.norms[k].weight.detach().double().numpy() + net.norms[k].bias.detach().double().numpy()
            sp = np.where(h > 20, h, np.log1p(np.exp(np.minimum(h, 20))))
            h = h * np.tanh(sp)
    if net.out_act == "tanh":
        h = np.tanh(h)
    return h


def expectile_scalar(x: float, tau: float) -> float:
    w = tau if x >= 0 else 1 - tau
    return w * x * x


def awr_scalar(a: float, temperature: float, clip: float) -> float:
    return min(math.exp(a / temperature), clip)


def infonce_loops(z: np.ndarray, pos: np.ndarray, alpha: float) -> float:
    n = len(z)
    total = 0.0
    for i in range(n):
        sims = [math.exp(-sum((z[i][k] - pos[j][k]) ** 2 for k in range(len(z[i]))) / alpha) for j in range(n)]
        total -= math.log(sims[i] / sum(sims))
    return total


def expectile_bisect(values, tau: float, tol: float = 1e-12) -> float:
    """Root of sum_i |tau - 1[v_i < m]| (v_i - m) = 0 in m."""
    lo, hi = min(values), max(values)
    while hi - lo > tol:
        m = 0.5 * (lo + hi)
        g = sum((tau if v >= m else 1 - tau) * (v - m) for v in values)
        if g > 0:
            lo = m
        else:
            hi = m
    return 0.5 * (lo + hi)


def fsq_scalar(x: float, level: int) -> int:
    return int(round((level // 2) * math.tanh(x)))


def mixed_radix(index: int, levels) -> list[int]:
    out = []
    for l in levels:
        out.append(index % l - l // 2)
        index //= l
    return out


def value_iteration(P: np.ndarray, R: np.ndarray, gamma: float, policy=None, tol: float = 1e-13, iters: int = 100000):
    """Policy evaluation (``policy`` given) or optimal control by fixed-point iteration."""
    n = P.shape[0]
    V = np.zeros(n)
    for _ in range(iters):
        Q = R + gamma * np.einsum("sad,d->sa", P, V)
        V_new = (policy * Q).sum(1) if policy is not None else Q.max(1)
        if np.abs(V_new - V).max() < tol:
            return V_new
        V = V_new
    return V


def gauss_rank(rows) -> int:
    """Exact rank over the rationals by Gaussian elimination."""
    m = [[Fraction(int(v)) for v in r] for r in rows]
    rank, ncols = 0, len(m[0]) if m else 0
    for c in range(ncols):
        piv = next((r for r in range(rank, len(m)) if m[r][c] != 0), None)
        if piv is None:
            continue
        m[rank], m[piv] = m[piv], m[rank]
        for r in range(len(m)):
            if r != rank and m[r][c] != 0:
                f = m[r][c] / m[rank][c]
                m[r] = [a - f * b for a, b in zip(m[r], m[rank])]
        rank += 1
    return rank


def feature_rank_oracle(m: np.ndarray, eps: float) -> int:
    x = m - m.mean(0)
    s = np.linalg.svd(x, compute_uv=False)
    s2 = sorted((v * v for v in s), reverse=True)
    total = sum(s2)
    if total == 0:
        return 0
    acc = 0.0
    for k, v in enumerate(s2, 1):
        acc += v
        if acc >= (1 - eps) * total:
            return k
    return len(s2)


def eps_abs_bruteforce(P, R, phi, weights=None):
    """Sup over (s, a) of L1 / abs gaps between per-state and preimage-averaged quantities."""
    n, m, _ = P.shape
    k = max(phi) + 1
    w = np.ones(n) if weights is None else np.asarray(weights)
    best_p = best_r = 0.0
    for s in range(n):
        for a in range(m):
            push = [sum(P[s, a, t] for t in range(n) if phi[t] == c) for c in range(k)]
            members = [u for u in range(n) if phi[u] == phi[s]]
            tot = sum(w[u] for u in members)
            bar = [sum(w[u] * sum(P[u, a, t] for t in range(n) if phi[t] == c) for u in members) / tot
                   for c in range(k)]
            rbar = sum(w[u] * R[u, a] for u in members) / tot
            best_p = max(best_p, sum(abs(x - y) for x, y in zip(push, bar)))
            best_r = max(best_r, abs(R[s, a] - rbar))
    return best_p, best_r


def torch_double(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def fsq_np(x: np.ndarray, fsq) -> tuple[np.ndarray, np.ndarray]:
    d = fsq.positions
    vals = np.empty_like(x)
    codes = np.zeros(x.shape[:-1] + (d,), dtype=np.int64)
    radix = 1
    for i, l in enumerate(fsq.levels):
        g = np.round((l // 2) * np.tanh(x[..., i * d:(i + 1) * d]))
        vals[..., i * d:(i + 1) * d] = g
        codes += (g.astype(np.int64) + l // 2) * radix
        radix *= l
    return vals, codes


def code_values_np(idx: np.ndarray, fsq) -> np.ndarray:
    d = fsq.positions
    out = np.empty(idx.shape[:-1] + (fsq.dim,))
    rest = idx.copy()
    for i, l in enumerate(fsq.levels):
        out[..., i * d:(i + 1) * d] = rest % l - l // 2
        rest //= l
    return out


def tc_oracle(wm, obs, act, rew, z, H, gamma, seed, temperature=1.0):
    obs, act, rew, z = (t.detach().numpy() for t in (obs, act, rew, z))
    g = torch.Generator().manual_seed(seed)
    K = wm.fsq.codebook_size
    c, _ = fsq_np(mlp_np(wm.encoder, obs[:, 0]), wm.fsq)
    total = 0.0
    for h in range(H):
        _, tgt = fsq_np(mlp_np(wm.encoder_target, obs[:, h + 1]), wm.fsq)
        inp = np.concatenate([c, act[:, h], z], axis=1)
        logits = mlp_np(wm.dynamics, inp).reshape(len(obs), -1, K)
        lse = np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1)) + logits.max(-1)
        ce = 0.0
        for b in range(len(obs)):
            ce += sum(lse[b, p] - logits[b, p, tgt[b, p]] for p in range(tgt.shape[1]))
        ce /= len(obs)
        r_hat = mlp_np(wm.reward, inp)[:, 0]
        mse = float(np.mean((r_hat - rew[:, h]) ** 2))
        total += gamma**h * (ce + mse)
        u = torch.rand(logits.shape, generator=g).clamp_(1e-10, 1.0 - 1e-7).double().numpy()
        noisy = (logits - np.log(-np.log(u))) / temperature
        c = code_values_np(noisy.argmax(-1), wm.fsq)
    return total
