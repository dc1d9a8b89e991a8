"""Reconstituted context memory.

Per generated chunk, context is rebuilt from the session's append-only bank:
the L most recent chunks (temporal) plus the top-K geometrically relevant
non-recent chunks (spatial), scored by camera-frustum overlap times an
exponential distance decay. Retrieved chunks are then temporally reframed:
they receive small consecutive positional indices adjacent to the current
chunk, so attention never sees absolute age.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .worldsim import CameraPose

SPATIAL_SCORE_THRESHOLD = 0.05
OVERLAP_DEPTHS = (1.0, 2.0, 4.0)
OVERLAP_GRID = 8  # 8x8 pixel-stratified sample points


@dataclass
class ChunkRecord:
    """One committed autoregressive unit: 4 latent frames plus metadata."""

    latent: object                 # (4, P, C) array or Tensor
    poses: Sequence[CameraPose]    # one per frame
    keys: int                      # per-chunk discrete action bitmask
    capture_index: int             # monotone counter at generation time

    def __post_init__(self):
        if len(self.poses) != 4:
            raise ValueError("a chunk holds exactly 4 frames")

    @property
    def center_pose(self) -> CameraPose:
        return self.poses[1]


class MemoryBank:
    """Append-only per-session chunk history."""

    def __init__(self):
        self._chunks: list[ChunkRecord] = []

    def append(self, rec: ChunkRecord) -> None:
        if self._chunks and rec.capture_index <= self._chunks[-1].capture_index:
            raise ValueError("capture_index must be strictly increasing")
        self._chunks.append(rec)

    def __len__(self) -> int:
        return len(self._chunks)

    def __getitem__(self, i):
        return self._chunks[i]

    def chunks(self) -> list[ChunkRecord]:
        return list(self._chunks)


@dataclass
class ContextSet:
    temporal: list[ChunkRecord] = field(default_factory=list)
    spatial: list[ChunkRecord] = field(default_factory=list)

    def ordered(self) -> list[ChunkRecord]:
        """All context chunks in capture order (temporal and spatial disjoint)."""
        return sorted(self.temporal + self.spatial, key=lambda r: r.capture_index)

    def capture_indices(self) -> tuple[int, ...]:
        return tuple(r.capture_index for r in self.ordered())

    def __len__(self) -> int:
        return len(self.temporal) + len(self.spatial)


def frustum_points(pose: CameraPose, depths=OVERLAP_DEPTHS, grid: int = OVERLAP_GRID) -> np.ndarray:
    """64 deterministic world points stratified over the camera frustum.

    Pixel centers of an 8x8 grid, pushed to depths cycling over `depths`.
    """
    intr = pose.intrinsics
    n = grid * grid
    i = np.arange(n)
    u = ((i % grid) + 0.5) / grid * intr.width
    v = ((i // grid) + 0.5) / grid * intr.height
    d = np.asarray(depths)[i % len(depths)]
    x_cam = (u - intr.cx) / intr.fx * d
    y_cam = (v - intr.cy) / intr.fy * d
    pts_cam = np.stack([x_cam, y_cam, d], axis=1)
    return pts_cam @ pose.rotation.T + pose.translation


def visible_fraction(pts: np.ndarray, pose: CameraPose) -> float:
    """Fraction of world points that project inside pose's image bounds with
    positive camera-frame depth."""
    intr = pose.intrinsics
    cam = pose.world_to_cam(pts)
    z = cam[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = intr.fx * cam[:, 0] / zs + intr.cx
    v = intr.fy * cam[:, 1] / zs + intr.cy
    ok = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return float(np.count_nonzero(ok)) / len(pts)


def fov_overlap(a: CameraPose, b: CameraPose) -> float:
    """How much of a's frustum lands inside b's view, in [0, 1]. Deterministic."""
    return visible_fraction(frustum_points(a), b)


def relevance(candidate: ChunkRecord, current_pose: CameraPose, world_size: float,
              score_mode: str = "multiplicative") -> float:
    """Geometric relevance of a past chunk for the chunk being generated.

    Overlap of the current frustum with the candidate's view, attenuated by
    camera distance (sigma = world_size / 4). The multiplicative form
    guarantees zero-overlap chunks are never retrieved; the additive variant
    stays available behind `score_mode`.
    """
    overlap = fov_overlap(current_pose, candidate.center_pose)
    dist = float(np.linalg.norm(current_pose.translation - candidate.center_pose.translation))
    decay = float(np.exp(-dist / (world_size / 4.0)))
    if score_mode == "additive":
        return 0.5 * (overlap + decay) if overlap > 0 else 0.0
    return overlap * decay


def reconstitute(bank: MemoryBank, current_pose: CameraPose, L: int, K: int,
                 world_size: float, threshold: float = SPATIAL_SCORE_THRESHOLD,
                 score_mode: str = "multiplicative") -> ContextSet:
    """Rebuild the memory context for the next chunk.

    temporal: the min(L, len(bank)) most recent chunks. spatial: top-K by
    relevance among the remaining chunks with score > threshold, ties broken
    toward larger capture_index. Pure function of (bank contents, pose, L, K).
    """
    if L < 0 or K < 0:
        raise ValueError("L and K must be non-negative")
    chunks = bank.chunks()
    temporal = chunks[-L:] if L > 0 else []
    candidates = chunks[: len(chunks) - len(temporal)]
    spatial: list[ChunkRecord] = []
    if K > 0 and candidates:
        scored = [(relevance(c, current_pose, world_size, score_mode), c) for c in candidates]
        scored = [(s, c) for s, c in scored if s > threshold]
        scored.sort(key=lambda sc: (-sc[0], -sc[1].capture_index))
        spatial = [c for _, c in scored[:K]]
    return ContextSet(temporal=temporal, spatial=spatial)


def reframe(ctx: ContextSet) -> np.ndarray:
    """Re-assign positional indices: context chunks in capture order get
    chunk positions 0..n-1 and the current chunk gets n. Per-frame fine
    positions are chunk_position * 4 + frame offset. Never depends on
    absolute capture_index."""
    n = len(ctx)
    return np.arange(n + 1, dtype=np.int64)


def fine_positions(chunk_positions: np.ndarray, frames_per_chunk: int = 4) -> np.ndarray:
    base = np.asarray(chunk_positions, dtype=np.int64) * frames_per_chunk
    return (base[:, None] + np.arange(frames_per_chunk)[None, :]).reshape(-1)


class MemoryTrace:
    """Debug dump: one JSON line per generated chunk with retrieved capture
    indices, scores, and reframed positions."""

    def __init__(self, path):
        self._f = open(path, "w")

    def write(self, chunk_index: int, ctx: ContextSet, scores: dict[int, float],
              positions: np.ndarray) -> None:
        rec = {
            "chunk": chunk_index,
            "temporal": [c.capture_index for c in ctx.temporal],
            "spatial": [c.capture_index for c in ctx.spatial],
            "scores": {str(k): round(v, 6) for k, v in scores.items()},
            "positions": [int(p) for p in positions],
        }
        self._f.write(json.dumps(rec) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()
