"""Weight checkpoint file.

One JSON document::

    {
      "format": "dsaa-checkpoint",
      "version": 1,
      "config": {...},              # free-form, makes the file self-describing
      "params": {
        "<name>": {"shape": [..], "data": "<base64 of little-endian float64 bytes, row-major>"},
        ...
      }
    }

Parameter names are dotted paths; the first component is a namespace
(``encoder.`` for the frozen text encoder, ``dsaa.`` for the adapters) so a
baseline file and a DSAA file can be merged without collisions.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

FORMAT = "dsaa-checkpoint"
VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(entry: Mapping) -> np.ndarray:
    shape = tuple(int(n) for n in entry["shape"])
    flat = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
    if flat.size != int(np.prod(shape)):
        raise ContractError(f"array payload has {flat.size} values, shape {shape} needs {int(np.prod(shape))}")
    return flat.astype(np.float64).reshape(shape)


def dumps(params: Mapping[str, np.ndarray], config: Mapping | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": dict(config or {}),
        "params": {name: encode_array(params[name]) for name in sorted(params)},
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def save(path: str | Path, params: Mapping[str, np.ndarray], config: Mapping | None = None) -> str:
    """Write a checkpoint and return its sha256 digest."""
    text = dumps(params, config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ContractError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {name: decode_array(entry) for name, entry in doc["params"].items()}
    return params, doc.get("config", {})


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
