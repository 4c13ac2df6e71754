"""Self-describing binary checkpoints.

Layout::

    b"CTXWM1" | uint32 LE manifest length | manifest (UTF-8 JSON) | payloads

The manifest lists every tensor with its module, name, shape, dtype and
byte offset into the payload region. Payloads are raw little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"CTXWM1"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint16": "<u2"}


def _as_numpy(t: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(t)


def save_checkpoint(
    path: str | Path,
    modules: Mapping[str, Mapping[str, torch.Tensor | np.ndarray]],
    meta: Mapping[str, Any] | None = None,
) -> None:
    entries = []
    blobs = []
    offset = 0
    for module_name in modules:
        for tensor_name, tensor in modules[module_name].items():
            arr = _as_numpy(tensor)
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise FormatError(f"unsupported dtype {dtype} for {module_name}/{tensor_name}")
            raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
            entries.append({
                "module": module_name,
                "name": tensor_name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "meta": dict(meta or {}), "tensors": entries}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, torch.Tensor]], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(data[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    payload = start + n
    modules: dict[str, dict[str, torch.Tensor]] = {}
    for e in manifest["tensors"]:
        lo = payload + e["offset"]
        arr = np.frombuffer(data[lo : lo + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
        arr = arr.astype(e["dtype"]).reshape(e["shape"])
        modules.setdefault(e["module"], {})[e["name"]] = torch.from_numpy(arr.copy())
    return modules, manifest["meta"]
