"""Lossless text checkpoints.

A checkpoint is a header of key/value metadata followed by named tensors
whose values are written as hexadecimal floats, so a load/save cycle is
byte-identical and no precision is lost.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "edgepop-ckpt 1"


def save_checkpoint(path, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    lines = [MAGIC]
    for key, value in meta.items():
        if any(ch in key for ch in " \n") or "\n" in str(value):
            raise ValueError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims}")
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(v.hex() for v in row))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path} is not a recognized checkpoint")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    idx = 1
    while idx < len(lines):
        line = lines[idx]
        if line == "end":
            break
        if line.startswith("meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = value
            idx += 1
            continue
        if not line.startswith("tensor "):
            raise ValueError(f"unexpected checkpoint line: {line!r}")
        _, name, dims = line.split(" ", 2)
        shape = tuple(int(d) for d in dims.split(","))
        n_rows = shape[0] if len(shape) > 1 else 1
        values = []
        for row_line in lines[idx + 1 : idx + 1 + n_rows]:
            values.extend(float.fromhex(tok) for tok in row_line.split(" "))
        tensors[name] = np.array(values).reshape(shape)
        idx += 1 + n_rows
    else:
        raise ValueError("checkpoint missing end marker")
    return meta, tensors
