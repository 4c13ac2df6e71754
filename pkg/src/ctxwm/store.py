"""On-disk artifacts: dataset manifests, transition tables and metric CSVs.

Every CSV written here starts with a ``# format_version=N`` line followed by
a normal header row. Readers refuse any other version.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .envs import TaskDataset, TaskSpec, act_dim, obs_dim
from .errors import FormatError

FORMAT_VERSION = 1
VERSION_LINE = f"# format_version={FORMAT_VERSION}"
MANIFEST = "manifest.json"
TRANSITIONS = "transitions.csv"


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(VERSION_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != VERSION_LINE:
            raise FormatError(f"{path}: expected {VERSION_LINE!r}, found {first!r}")
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: missing header")
    return rows[0], rows[1:]


def transition_header(n_obs: int, n_act: int) -> list[str]:
    return (
        ["task_id", "episode", "t"]
        + [f"s{i}" for i in range(n_obs)]
        + [f"a{i}" for i in range(n_act)]
        + ["r"]
        + [f"sp{i}" for i in range(n_obs)]
        + ["done"]
    )


def save_datasets(
    out_dir: str | Path,
    datasets: Sequence[TaskDataset],
    test_specs: Mapping[str, Sequence[TaskSpec]] | None = None,
    seed: int = 0,
    extra: Mapping | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec0 = datasets[0].spec
    n_obs, n_act = obs_dim(spec0), act_dim(spec0)
    manifest = {
        "format_version": FORMAT_VERSION,
        "family": spec0.family,
        "seed": seed,
        "obs_dim": n_obs,
        "act_dim": n_act,
        "transitions_file": TRANSITIONS,
        "tasks": [
            {
                "task_id": ds.task_id,
                "split": "train",
                "spec": ds.spec.to_json(),
                "size": len(ds),
                "episodes": ds.n_episodes,
                "episode_quality": ds.episode_quality,
            }
            for ds in datasets
        ],
        "test_tasks": {
            split: [s.to_json() for s in specs] for split, specs in (test_specs or {}).items()
        },
        "extra": dict(extra or {}),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=False) + "\n")

    def rows():
        for ds in datasets:
            for i in range(len(ds)):
                yield [ds.task_id, int(ds.episode[i]), int(ds.t[i]), *ds.s[i], *ds.a[i], ds.r[i], *ds.sp[i],
                       int(ds.done[i])]

    write_csv(out / TRANSITIONS, transition_header(n_obs, n_act), rows())
    return out


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / MANIFEST
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    return manifest


def load_datasets(data_dir: str | Path) -> tuple[list[TaskDataset], dict[str, list[TaskSpec]], dict]:
    manifest = load_manifest(data_dir)
    n_obs, n_act = manifest["obs_dim"], manifest["act_dim"]
    header, rows = read_csv(Path(data_dir) / manifest["transitions_file"])
    if header != transition_header(n_obs, n_act):
        raise FormatError("transition header does not match the manifest dimensions")
    table = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
    datasets = []
    for task in manifest["tasks"]:
        sel = table[table[:, 0] == task["task_id"]]
        o = 3
        datasets.append(TaskDataset(
            task_id=int(task["task_id"]),
            spec=TaskSpec.from_json(task["spec"]),
            episode=sel[:, 1].astype(np.int64),
            t=sel[:, 2].astype(np.int64),
            s=sel[:, o : o + n_obs],
            a=sel[:, o + n_obs : o + n_obs + n_act],
            r=sel[:, o + n_obs + n_act],
            sp=sel[:, o + n_obs + n_act + 1 : o + 2 * n_obs + n_act + 1],
            done=sel[:, -1],
            episode_quality=list(task["episode_quality"]),
        ))
    tests = {split: [TaskSpec.from_json(s) for s in specs] for split, specs in manifest["test_tasks"].items()}
    return datasets, tests, manifest
