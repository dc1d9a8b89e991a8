"""Checkpoint format: one binary file per tensor plus a JSON manifest.

Tensor file layout (little-endian): magic "WPT0", rank u8, extents u32[rank],
then fp32 payload. The manifest maps parameter names to files and records the
config plus its hash so any artifact is reproducible from its manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"WPT0"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_tensor(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4", order="C")  # rank 0 stays rank 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<B", f.read(1))
        extents = struct.unpack(f"<{rank}I", f.read(4 * rank))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != int(np.prod(extents, dtype=np.int64)):
        raise ValueError(f"{path}: payload size does not match extents {extents}")
    return data.reshape(extents).copy()


def save_checkpoint(ckpt_dir, params: dict[str, Tensor], config: dict) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, tensor in params.items():
        fname = name.replace("/", "_") + ".wpt"
        write_tensor(ckpt_dir / fname, tensor.data)
        files[name] = fname
    manifest = {
        "format": "WPT0",
        "params": files,
        "config": config,
        "config_hash": config_hash(config),
    }
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(ckpt_dir, dtype=np.float32) -> tuple[dict[str, Tensor], dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    params = {}
    for name, fname in manifest["params"].items():
        arr = read_tensor(ckpt_dir / fname).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return params, manifest["config"]


def params_fingerprint(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]
