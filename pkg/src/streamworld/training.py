"""Flow-matching training over 4-chunk windows, staged.

Stage 1a trains the action-conditioned model bidirectionally (full attention
over the window, one shared noise level), 1b switches the same weights to
block-causal attention with independent per-chunk noise (diffusion-forcing
style), stage 2 adds reconstituted memory context to the causal model, and
stage 3-teacher trains the bidirectional variant with the aligned context set
(union of the window chunks' retrieved contexts minus the window itself) that
distillation will condition on.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import normalize_frames
from .memory import ChunkRecord, ContextSet, reconstitute, relevance
from .model import ModelConfig, NoisePath, WindowBatch, forward, frames_to_chunks
from .optim import OptimState, opt_step
from .rng import Rng
from .worldsim import CHUNK_FRAMES, Episode, chunk_keys

STAGES = ("1a", "1b", "2", "3-teacher")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-4
    seed: int = 0
    log_path: str | None = None


class EpisodeData:
    """Episode prepared for training: patchified chunks plus retrieval metadata."""

    def __init__(self, ep: Episode, cfg: ModelConfig):
        self.chunks = frames_to_chunks(normalize_frames(ep.frames), cfg.patch)
        n = self.chunks.shape[0]
        self.keys = np.array([chunk_keys(ep.actions[c * 4:(c + 1) * 4]) for c in range(n)], np.int64)
        self.poses_rt = np.stack([[ep.poses[c * 4 + f].rt_matrix() for f in range(4)] for c in range(n)])
        self.intrinsics = ep.poses[0].intrinsics
        self.records = [
            ChunkRecord(latent=self.chunks[c], poses=ep.poses[c * 4:(c + 1) * 4],
                        keys=int(self.keys[c]), capture_index=c)
            for c in range(n)
        ]

    @property
    def n_chunks(self) -> int:
        return self.chunks.shape[0]


class _PrefixBank:
    """Read-only view of the first n records, for teacher-forced retrieval."""

    def __init__(self, records, n):
        self._records = records
        self._n = n

    def chunks(self):
        return list(self._records[: self._n])


def window_contexts(epd: EpisodeData, cfg: ModelConfig, j: int, world_size: float
                    ) -> tuple[list[ChunkRecord], list[set[int]], list[ContextSet]]:
    """Per-chunk retrieved contexts for window [j, j+4) and their union minus
    the window (the teacher-aligned context set)."""
    window_ids = set(range(j, j + cfg.window))
    sets = []
    for i in range(j, j + cfg.window):
        bank = _PrefixBank(epd.records, i)
        sets.append(reconstitute(bank, epd.records[i].center_pose,
                                 cfg.temporal_ctx, cfg.spatial_ctx, world_size))
    by_id: dict[int, ChunkRecord] = {}
    for cs in sets:
        for rec in cs.ordered():
            if rec.capture_index not in window_ids:
                by_id[rec.capture_index] = rec
    ctx_records = [by_id[i] for i in sorted(by_id)]
    vis = [set(r.capture_index for r in cs.ordered()) for cs in sets]
    return ctx_records, vis, sets


def max_ctx_chunks(cfg: ModelConfig) -> int:
    return cfg.temporal_ctx + cfg.window * cfg.spatial_ctx


def build_window_batch(episodes: list[EpisodeData], cfg: ModelConfig, stage: str,
                       world_size: float, rng: Rng, batch: int
                       ) -> tuple[WindowBatch, np.ndarray]:
    """Sample windows, noise them along the linear path, and assemble the
    padded sequence batch. Returns (batch, velocity target)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}'")
    use_memory = stage in ("2", "3-teacher")
    bidirectional = stage in ("1a", "3-teacher")
    W = cfg.window
    F, P, C = cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels

    picks = []
    for b in range(batch):
        brng = rng.child("item", b)
        epd = episodes[int(brng.integers(0, len(episodes)))]
        j = int(brng.integers(0, epd.n_chunks - W + 1))
        if use_memory:
            ctx_records, vis_sets, _ = window_contexts(epd, cfg, j, world_size)
        else:
            ctx_records, vis_sets = [], []
        picks.append((epd, j, ctx_records, vis_sets))
    Cn = max((len(p[2]) for p in picks), default=0)  # pad to the batch max

    z0 = np.empty((batch, W, F, P, C), np.float32)
    keys = np.zeros((batch, W), np.int64)
    poses = np.zeros((batch, W, F, 3, 4))
    ctx = np.zeros((batch, Cn, F, P, C), np.float32)
    ctx_keys = np.zeros((batch, Cn), np.int64)
    ctx_poses = np.tile(np.eye(3, 4), (batch, Cn, F, 1, 1))
    ctx_valid = np.zeros((batch, Cn), bool)
    ctx_vis = np.zeros((batch, W, Cn), bool)
    chunk_pos = np.zeros((batch, Cn + W), np.int64)
    intr = episodes[0].intrinsics

    for b, (epd, j, ctx_records, vis_sets) in enumerate(picks):
        z0[b] = epd.chunks[j: j + W]
        keys[b] = epd.keys[j: j + W]
        poses[b] = epd.poses_rt[j: j + W]
        cn_real = len(ctx_records)
        for c, rec in enumerate(ctx_records):
            ctx[b, c] = np.asarray(rec.latent, np.float32)
            ctx_keys[b, c] = rec.keys
            ctx_poses[b, c] = epd.poses_rt[rec.capture_index]
            ctx_valid[b, c] = True
            for w in range(W):
                ctx_vis[b, w, c] = True if stage == "3-teacher" else rec.capture_index in vis_sets[w]
        if cfg.reframe_mode == "absolute":
            chunk_pos[b, :cn_real] = [r.capture_index for r in ctx_records]
            chunk_pos[b, Cn:] = np.arange(j, j + W)
        else:
            chunk_pos[b, :cn_real] = np.arange(cn_real)
            chunk_pos[b, Cn:] = cn_real + np.arange(W)

    if bidirectional:
        k = np.repeat(rng.uniform(size=(batch, 1)), W, axis=1).astype(np.float32)
    else:
        k = rng.uniform(size=(batch, W)).astype(np.float32)
    z1 = rng.randn(batch, W, F, P, C, dtype=np.float32)
    path = NoisePath(z0=z0, z1=z1, k=k)
    wb = WindowBatch(x=path.z_k, k=k, keys=keys, poses=poses, intrinsics=intr,
                     ctx=ctx, ctx_keys=ctx_keys, ctx_poses=ctx_poses,
                     ctx_valid=ctx_valid, ctx_vis=ctx_vis,
                     chunk_pos=chunk_pos, bidirectional=bidirectional)
    return wb, path.velocity


def fm_train_step(params: dict, opt: OptimState, episodes: list[EpisodeData],
                  cfg: ModelConfig, stage: str, world_size: float, rng: Rng,
                  batch: int = 4) -> float:
    """One flow-matching step: mean squared velocity error plus an optimizer
    update. Raises on a non-finite loss."""
    wb, v_target = build_window_batch(episodes, cfg, stage, world_size, rng, batch)
    with T.Tape() as tape:
        v_hat = forward(params, cfg, wb)
        loss = T.mean(T.mul(T.sub(v_hat, v_target), T.sub(v_hat, v_target)))
        grads = tape.backward(loss)
    value = loss.item()
    if not np.isfinite(value):
        raise T.NumericsError("non-finite training loss")
    by_name = {n: grads[p] for n, p in params.items() if p in grads}
    opt_step(params, by_name, opt)
    return value


def train_stage(params: dict, cfg: ModelConfig, stage: str, episodes: list[Episode],
                tcfg: TrainConfig, world_size: float) -> list[float]:
    """Run a stage; returns the per-step loss history and appends JSON lines
    (step, stage, loss, lr, seed) to tcfg.log_path when set."""
    data = [EpisodeData(ep, cfg) for ep in episodes]
    opt = OptimState(lr=tcfg.lr)
    rng = Rng(tcfg.seed).child("train", stage)
    losses = []
    log_f = open(tcfg.log_path, "a") if tcfg.log_path else None
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        loss = fm_train_step(params, opt, data, cfg, stage, world_size,
                             rng.child(step), batch=tcfg.batch)
        losses.append(loss)
        if log_f:
            log_f.write(json.dumps({"step": step, "stage": stage, "loss": loss,
                                    "lr": tcfg.lr, "seed": tcfg.seed}) + "\n")
    if log_f:
        log_f.write(json.dumps({"stage": stage, "steps": tcfg.steps,
                                "wall_s": round(time.perf_counter() - t0, 2)}) + "\n")
        log_f.close()
    return losses
