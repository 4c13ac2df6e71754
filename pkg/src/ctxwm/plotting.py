"""Figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def training_curves(header: Sequence[str], rows: Sequence[Sequence], path: str | Path, title: str) -> Path:
    data = np.asarray(rows, dtype=np.float64)
    cols = list(header[1:])
    fig, axes = plt.subplots(1, len(cols), figsize=(3.2 * len(cols), 2.8))
    for ax, j, name in zip(np.atleast_1d(axes), range(1, len(header)), cols):
        if len(data):
            ax.plot(data[:, 0], data[:, j], lw=1)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
    fig.suptitle(title, fontsize=10)
    return _save(fig, Path(path))


def eval_returns(rows: Sequence[Sequence], path: str | Path) -> Path:
    """Mean return per (task, protocol) from results rows."""
    groups: dict[tuple[int, str], list[float]] = {}
    for task_id, protocol, k, _, ret, _ in rows:
        groups.setdefault((int(task_id), f"{protocol}" + (f"-k{k}" if protocol == "few" else "")), []).append(float(ret))
    tasks = sorted({t for t, _ in groups})
    protos = sorted({p for _, p in groups})
    width = 0.8 / max(len(protos), 1)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(tasks)), 3))
    for i, p in enumerate(protos):
        means = [np.mean(groups.get((t, p), [np.nan])) for t in tasks]
        ax.bar(np.arange(len(tasks)) + i * width, means, width, label=p)
    ax.set_xticks(np.arange(len(tasks)) + 0.4 - width / 2, [str(t) for t in tasks])
    ax.set_xlabel("task")
    ax.set_ylabel("mean return")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def bound_scatter(lhs: Sequence[float], rhs: Sequence[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    lhs, rhs = np.asarray(lhs, dtype=np.float64), np.asarray(rhs, dtype=np.float64)
    ax.loglog(np.maximum(rhs, 1e-12), np.maximum(lhs, 1e-12), ".", ms=3)
    lim = [1e-12, max(1.0, float(rhs.max(initial=1.0)))]
    ax.plot(lim, lim, "k--", lw=0.8)
    ax.set_xlabel("bound")
    ax.set_ylabel("measured value gap")
    return _save(fig, Path(path))


def timing_bars(rows: Sequence[Sequence], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    names = [r[0] for r in rows]
    ax.barh(names, [float(r[3]) for r in rows])
    ax.set_xlabel("steps / s")
    return _save(fig, Path(path))
