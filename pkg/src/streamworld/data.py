"""Episode and dataset storage.

Episode directory: frames.bin (raw RGB8, frame-major) plus meta.jsonl with
one object per frame: pose as 12 floats (row-major [R|T], camera-to-world),
intrinsics, action bitmask, and trajectory kind. A dataset manifest JSON
lists episode directories and split tags.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .rng import Rng
from .worldsim import (CHUNK_FRAMES, CameraPose, Episode, GridWorld, Intrinsics,
                       TRAJECTORY_KINDS, generate_world, make_trajectory)


def save_episode(ep_dir, ep: Episode) -> None:
    ep_dir = Path(ep_dir)
    ep_dir.mkdir(parents=True, exist_ok=True)
    (ep_dir / "frames.bin").write_bytes(np.ascontiguousarray(ep.frames).tobytes())
    with open(ep_dir / "meta.jsonl", "w") as f:
        for pose, action in zip(ep.poses, ep.actions):
            rec = {
                "pose": [float(v) for v in pose.rt_matrix().reshape(-1)],
                "intrinsics": pose.intrinsics.as_dict(),
                "action": int(action),
                "kind": ep.kind,
            }
            f.write(json.dumps(rec) + "\n")


def load_episode(ep_dir) -> Episode:
    ep_dir = Path(ep_dir)
    metas = [json.loads(line) for line in open(ep_dir / "meta.jsonl")]
    intr_d = metas[0]["intrinsics"]
    intr = Intrinsics(fx=intr_d["fx"], fy=intr_d["fy"], cx=intr_d["cx"], cy=intr_d["cy"],
                      width=intr_d["w"], height=intr_d["h"])
    h, w = intr.height, intr.width
    raw = np.frombuffer((ep_dir / "frames.bin").read_bytes(), dtype=np.uint8)
    frames = raw.reshape(len(metas), h, w, 3).copy()
    poses = []
    for m in metas:
        rt = np.array(m["pose"], dtype=np.float64).reshape(3, 4)
        poses.append(CameraPose(rotation=rt[:, :3], translation=rt[:, 3], intrinsics=intr))
    actions = np.array([m["action"] for m in metas], dtype=np.uint8)
    return Episode(frames=frames, poses=poses, actions=actions, kind=metas[0]["kind"])


DEFAULT_KIND_WEIGHTS = {"random_walk": 0.45, "out_and_back": 0.4, "loop": 0.15}


def generate_dataset(out_dir, n_episodes: int, length: int, seed: int,
                     world_size: int = 24, frame_size: int = 64,
                     n_worlds: int = 8, val_fraction: float = 0.1) -> dict:
    """Render episodes across a handful of worlds and write a manifest."""
    from .worldsim import default_intrinsics

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    intr = default_intrinsics(frame_size)
    worlds = [generate_world(rng.child("wseed", i).seed, size=world_size) for i in range(n_worlds)]
    kinds = list(DEFAULT_KIND_WEIGHTS)
    probs = np.array([DEFAULT_KIND_WEIGHTS[k] for k in kinds])
    episodes = []
    for i in range(n_episodes):
        erng = rng.child("episode", i)
        world = worlds[int(erng.integers(0, n_worlds))]
        kind = erng.choice(kinds, p=probs / probs.sum())
        ep = make_trajectory(world, kind, length, seed=erng.seed, intrinsics=intr)
        name = f"ep{i:05d}"
        save_episode(out_dir / name, ep)
        episodes.append({"dir": name, "kind": kind, "world_seed": world.seed, "length": length})
    n_val = max(1, int(len(episodes) * val_fraction)) if len(episodes) > 1 else 0
    manifest = {
        "episodes": episodes,
        "splits": {
            "train": [e["dir"] for e in episodes[: len(episodes) - n_val]],
            "val": [e["dir"] for e in episodes[len(episodes) - n_val:]],
        },
        "seed": seed,
        "world_size": world_size,
        "frame_size": frame_size,
        "length": length,
    }
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(data_dir, split: str = "train") -> list[Episode]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "dataset.json").read_text())
    return [load_episode(data_dir / name) for name in manifest["splits"][split]]


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """uint8 RGB -> fp32 in [-1, 1]."""
    return frames.astype(np.float32) / 127.5 - 1.0


def denormalize_frames(z: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(z, dtype=np.float32) + 1.0) * 127.5), 0, 255).astype(np.uint8)
