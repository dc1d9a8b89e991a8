"""Streaming autoregressive inference with a per-session KV cache.

Per chunk: reconstitute memory, reframe positions, rebuild the context
key/value cache when the context changed (first denoise step), then run the
Euler flow integration on the current chunk only. Cached context entries are
computed once at noise level 0; the noise level of the chunk being denoised
enters through modulation only, so the cache is k-independent by
construction. Per-chunk latency is flat in history length because attention
touches at most L+K context chunks.

The cached path is plain numpy (no tape); the uncached reference path reuses
the training `forward`, so the cache-equivalence test cross-checks both
implementations against each other.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .actions import build_dproj_rt, key_bits, timestep_embedding
from .data import denormalize_frames
from .memory import ChunkRecord, ContextSet, MemoryBank, MemoryTrace, reconstitute, reframe, relevance
from .model import ModelConfig, WindowBatch, forward, rope_angles, unpatchify
from .rng import Rng
from .worldsim import CameraPose, GridWorld


# ---------------------------------------------------------------------------
# schedules


def teacher_schedule(steps: int = 20, start: float = 0.95) -> list[float]:
    """Uniformly spaced noise levels from `start` down toward 0."""
    return [start * (steps - i) / steps for i in range(steps)]


def student_schedule() -> list[float]:
    return [1.0, 0.75, 0.5, 0.25]


def truncated_schedule(base: list[float], s: int) -> list[float]:
    """First s knots of a schedule; the final Euler step always lands on 0."""
    if not 1 <= s <= len(base):
        raise ValueError("step count out of range")
    return base[:s]


def _check_schedule(schedule: list[float]) -> None:
    if len(schedule) == 0:
        raise ValueError("empty denoise schedule")
    arr = np.asarray(schedule)
    if not ((arr > 0).all() and (arr <= 1).all() and (np.diff(arr) < 0).all() if len(arr) > 1 else (0 < arr[0] <= 1)):
        raise ValueError("schedule must be strictly decreasing in (0, 1]")


# ---------------------------------------------------------------------------
# numpy inference engine


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _rot(x, angles):
    c = np.cos(angles).astype(x.dtype)
    s = np.sin(angles).astype(x.dtype)
    out = np.empty_like(x)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def _apply4(x, m):
    # x (..., T, G, 4) with m (..., T, 4, 4) sharing leading dims
    return np.einsum("...tij,...tgj->...tgi", m, x)


def _np_cond(params, cfg: ModelConfig, k_all: np.ndarray, keys_all: np.ndarray) -> np.ndarray:
    P = {n: t.data for n, t in params.items()}
    t = timestep_embedding(k_all, cfg.dim)
    t = _silu(t @ P["time_mlp.w1"] + P["time_mlp.b1"]) @ P["time_mlp.w2"] + P["time_mlp.b2"]
    if cfg.use_keys:
        kb = key_bits(keys_all) @ P["key_table"]
        kb = _silu(kb @ P["key_mlp.w1"] + P["key_mlp.b1"]) @ P["key_mlp.w2"] + P["key_mlp.b2"]
        t = t + kb
    return _silu(t)


@dataclass
class CtxCache:
    """Per-layer cached context keys/values, tagged by what produced them."""

    tag: tuple
    n_tokens: int
    k1: list = field(default_factory=list)   # roped keys per layer (H, Tc, hd)
    v1: list = field(default_factory=list)
    k2: list = field(default_factory=list)   # frustum-transformed (continuous modes)
    v2: list = field(default_factory=list)


def context_tag(ctx: ContextSet, positions: np.ndarray) -> tuple:
    return (ctx.capture_indices(), tuple(int(p) for p in positions))


def _stack_ctx(ctx: ContextSet, cfg: ModelConfig):
    ordered = ctx.ordered()
    lat = np.stack([np.asarray(r.latent, dtype=np.float32) for r in ordered])
    keys = np.array([r.keys for r in ordered], dtype=np.int64)
    poses = np.stack([[p.rt_matrix() for p in r.poses] for r in ordered])
    return ordered, lat, keys, poses


def encode_context(params, cfg: ModelConfig, ctx: ContextSet, positions: np.ndarray,
                   ref_d: np.ndarray, intrinsics, tag: tuple) -> CtxCache:
    """Run the blocks over context tokens only (chunk-local attention, k=0)
    and cache each layer's keys/values."""
    P = {n: t.data for n, t in params.items()}
    cn = len(ctx)
    cache = CtxCache(tag=tag, n_tokens=cn * cfg.tokens_per_chunk)
    if cn == 0:
        return cache
    _, lat, keys, poses = _stack_ctx(ctx, cfg)
    tpc, F, Pn, D = cfg.tokens_per_chunk, cfg.chunk_frames, cfg.tokens_per_frame, cfg.dim
    h = lat.reshape(cn, tpc, cfg.channels) @ P["patch_in.w"] + P["patch_in.b"]
    cond = _np_cond(params, cfg, np.zeros(cn, np.float32), keys)  # (cn, D)
    angles = rope_angles(cfg, np.asarray(positions).reshape(cn, 1))  # (cn, tpc, pairs)
    angles = angles[:, None, :, :]
    dmats = None
    if cfg.use_poses:
        dproj = build_dproj_rt(poses.reshape(cn * F, 3, 4), intrinsics, cfg.near, cfg.far)
        dproj = np.repeat(dproj, Pn, axis=0)                      # (Tc, 4, 4)
        drel = dproj @ np.linalg.inv(ref_d)
        dmats = (np.swapaxes(drel, -1, -2).astype(np.float32).reshape(cn, tpc, 4, 4),
                 np.linalg.inv(drel).astype(np.float32).reshape(cn, tpc, 4, 4),
                 drel.astype(np.float32).reshape(cn, tpc, 4, 4))
    H, hd = cfg.heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(hd))
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        mod = (cond @ P[pre + "mod.w"] + P[pre + "mod.b"])[:, None, :]  # (cn, 1, 6D)
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = np.split(mod, 6, axis=-1)
        hn = _ln(h) * (1 + sc_a) + sh_a
        q = (hn @ P[pre + "attn.wq"] + P[pre + "attn.bq"]).reshape(cn, tpc, H, hd).transpose(0, 2, 1, 3)
        k = (hn @ P[pre + "attn.wk"] + P[pre + "attn.bk"]).reshape(cn, tpc, H, hd).transpose(0, 2, 1, 3)
        v = (hn @ P[pre + "attn.wv"] + P[pre + "attn.bv"]).reshape(cn, tpc, H, hd).transpose(0, 2, 1, 3)
        q1, k1 = _rot(q, angles), _rot(k, angles)
        cache.k1.append(np.ascontiguousarray(k1.transpose(1, 0, 2, 3).reshape(H, cn * tpc, hd)))
        cache.v1.append(np.ascontiguousarray(v.transpose(1, 0, 2, 3).reshape(H, cn * tpc, hd)))
        attn = _softmax((q1 * scale) @ k1.swapaxes(-1, -2)) @ v
        if dmats is not None:
            d_t, d_inv, d_fwd = dmats
            gq = q.reshape(cn, H, tpc, hd // 4, 4)
            gk = k.reshape(cn, H, tpc, hd // 4, 4)
            gv = v.reshape(cn, H, tpc, hd // 4, 4)
            q2 = _apply4(gq, d_t[:, None]).reshape(cn, H, tpc, hd)
            k2 = _apply4(gk, d_inv[:, None]).reshape(cn, H, tpc, hd)
            v2 = _apply4(gv, d_inv[:, None]).reshape(cn, H, tpc, hd)
            cache.k2.append(np.ascontiguousarray(k2.transpose(1, 0, 2, 3).reshape(H, cn * tpc, hd)))
            cache.v2.append(np.ascontiguousarray(v2.transpose(1, 0, 2, 3).reshape(H, cn * tpc, hd)))
            a2 = _softmax((q2 * scale) @ k2.swapaxes(-1, -2)) @ v2
            a2 = _apply4(a2.reshape(cn, H, tpc, hd // 4, 4), d_fwd[:, None]).reshape(cn, H, tpc, hd)
            attn = attn + float(P[pre + "attn.pose_gate"]) * a2
        a = attn.transpose(0, 2, 1, 3).reshape(cn, tpc, D) @ P[pre + "attn.wo"] + P[pre + "attn.bo"]
        h = h + g_a * a
        hn2 = _ln(h) * (1 + sc_m) + sh_m
        h = h + g_m * (_silu(hn2 @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"]) @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"])
    return cache


def forward_chunk_cached(params, cfg: ModelConfig, x: np.ndarray, k: float, keys: int,
                         poses_rt: np.ndarray, position: int, cache: CtxCache,
                         intrinsics) -> np.ndarray:
    """Velocity for one noisy chunk attending to [cached context, itself]."""
    P = {n: t.data for n, t in params.items()}
    tpc, F, Pn, D = cfg.tokens_per_chunk, cfg.chunk_frames, cfg.tokens_per_frame, cfg.dim
    h = x.reshape(tpc, cfg.channels) @ P["patch_in.w"] + P["patch_in.b"]
    cond = _np_cond(params, cfg, np.array([k], np.float32), np.array([keys]))  # (1, D)
    angles = rope_angles(cfg, np.array([position]))[None, :, :]  # (1, tpc, pairs)
    dmats = None
    if cfg.use_poses:
        dproj = build_dproj_rt(poses_rt.reshape(F, 3, 4), intrinsics, cfg.near, cfg.far)
        dproj = np.repeat(dproj, Pn, axis=0)
        ref = dproj[-1]
        drel = dproj @ np.linalg.inv(ref)
        dmats = (np.swapaxes(drel, -1, -2).astype(np.float32),
                 np.linalg.inv(drel).astype(np.float32),
                 drel.astype(np.float32))
    H, hd = cfg.heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(hd))
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        mod = cond @ P[pre + "mod.w"] + P[pre + "mod.b"]
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = np.split(mod, 6, axis=-1)
        hn = _ln(h) * (1 + sc_a) + sh_a
        q = (hn @ P[pre + "attn.wq"] + P[pre + "attn.bq"]).reshape(tpc, H, hd).transpose(1, 0, 2)
        kk = (hn @ P[pre + "attn.wk"] + P[pre + "attn.bk"]).reshape(tpc, H, hd).transpose(1, 0, 2)
        v = (hn @ P[pre + "attn.wv"] + P[pre + "attn.bv"]).reshape(tpc, H, hd).transpose(1, 0, 2)
        q1, k1 = _rot(q, angles), _rot(kk, angles)
        K1 = np.concatenate([cache.k1[i], k1], axis=1) if cache.n_tokens else k1
        V1 = np.concatenate([cache.v1[i], v], axis=1) if cache.n_tokens else v
        attn = _softmax((q1 * scale) @ K1.swapaxes(-1, -2)) @ V1
        if dmats is not None:
            d_t, d_inv, d_fwd = dmats
            q2 = _apply4(q.reshape(H, tpc, hd // 4, 4), d_t[None]).reshape(H, tpc, hd)
            k2 = _apply4(kk.reshape(H, tpc, hd // 4, 4), d_inv[None]).reshape(H, tpc, hd)
            v2 = _apply4(v.reshape(H, tpc, hd // 4, 4), d_inv[None]).reshape(H, tpc, hd)
            K2 = np.concatenate([cache.k2[i], k2], axis=1) if cache.n_tokens else k2
            V2 = np.concatenate([cache.v2[i], v2], axis=1) if cache.n_tokens else v2
            a2 = _softmax((q2 * scale) @ K2.swapaxes(-1, -2)) @ V2
            a2 = _apply4(a2.reshape(H, tpc, hd // 4, 4), d_fwd[None]).reshape(H, tpc, hd)
            attn = attn + float(P[pre + "attn.pose_gate"]) * a2
        a = attn.transpose(1, 0, 2).reshape(tpc, D) @ P[pre + "attn.wo"] + P[pre + "attn.bo"]
        h = h + g_a * a
        hn2 = _ln(h) * (1 + sc_m) + sh_m
        h = h + g_m * (_silu(hn2 @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"]) @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"])
    fmod = cond @ P["final.mod.w"] + P["final.mod.b"]
    shift, scale_f = np.split(fmod, 2, axis=-1)
    out = (_ln(h) * (1 + scale_f) + shift) @ P["final.head.w"] + P["final.head.b"]
    return out.reshape(cfg.chunk_frames, Pn, cfg.channels)


# ---------------------------------------------------------------------------
# denoising


def denoise_chunk(forward_fn, schedule: list[float], x_init: np.ndarray) -> np.ndarray:
    """Euler integration of the linear flow: x <- x + (k_s - k_next) * v,
    ending at k = 0 so the returned chunk is clean."""
    _check_schedule(schedule)
    x = x_init.astype(np.float32)
    for s, k_s in enumerate(schedule):
        k_next = schedule[s + 1] if s + 1 < len(schedule) else 0.0
        v = forward_fn(x, float(k_s))
        x = x + np.float32(k_s - k_next) * v
    return x


def progressive_decode(chunk_latent: np.ndarray, cfg: ModelConfig):
    """Yield the chunk's frames one at a time, in order, as soon as each is
    unpatchified; a slow consumer delays later frames, not earlier ones."""
    for f in range(cfg.chunk_frames):
        yield denormalize_frames(unpatchify(chunk_latent[f], cfg.patch, cfg.frame_size))


class FrameStream:
    """Ordered frame hand-off between the generation loop and a consumer.

    Bounded at 16 frames; the producer blocks when the consumer lags."""

    CAPACITY = 16

    def __init__(self):
        self._q: queue.Queue = queue.Queue(maxsize=self.CAPACITY)

    def put(self, index: int, frame: np.ndarray) -> None:
        self._q.put((index, frame))

    def get(self, timeout: float | None = None):
        return self._q.get(timeout=timeout)

    def close(self) -> None:
        self._q.put((None, None))


# ---------------------------------------------------------------------------
# rollout session


class RolloutSession:
    """One generation loop: owns the memory bank and the KV cache.

    Reproducible from (params, config, first chunk, action stream, noise
    seed); resident attention context never exceeds L+K chunks.
    """

    def __init__(self, params: dict, cfg: ModelConfig, first_chunk: ChunkRecord,
                 world_size: float, noise_seed: int, use_cache: bool = True,
                 trace: MemoryTrace | None = None, schedule: list[float] | None = None):
        self.params = params
        self.cfg = cfg
        self.world_size = world_size
        self.rng = Rng(noise_seed)
        self.use_cache = use_cache
        self.trace = trace
        self.schedule = schedule if schedule is not None else student_schedule()
        _check_schedule(self.schedule)
        self.bank = MemoryBank()
        self.bank.append(first_chunk)
        self.intrinsics = first_chunk.poses[0].intrinsics
        self.cache: CtxCache | None = None
        self.cache_rebuilds = 0
        self.chunk_times_ms: list[float] = []
        self.last_retrieved: list[int] = []
        self._next_capture = first_chunk.capture_index + 1

    def _positions(self, ctx: ContextSet) -> np.ndarray:
        if self.cfg.reframe_mode == "absolute":
            caps = list(ctx.capture_indices()) + [self._next_capture]
            return np.asarray(caps, dtype=np.int64)
        return reframe(ctx)

    def step(self, keys: int, poses: list[CameraPose]) -> ChunkRecord:
        """Generate and commit the next chunk for the given commanded action."""
        t0 = time.perf_counter()
        cfg = self.cfg
        ctx = reconstitute(self.bank, poses[1], cfg.temporal_ctx, cfg.spatial_ctx, self.world_size)
        positions = self._positions(ctx)
        poses_rt = np.stack([p.rt_matrix() for p in poses])
        x = self.rng.child("init", self._next_capture).randn(
            cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels, dtype=np.float32)

        if self.use_cache:
            ref_d = None
            if cfg.use_poses:
                dlast = build_dproj_rt(poses_rt[-1:].reshape(1, 3, 4), self.intrinsics, cfg.near, cfg.far)
                ref_d = dlast[0]
            tag = context_tag(ctx, positions)
            clean = None
            for s, k_s in enumerate(self.schedule):
                if s == 0 and (self.cache is None or self.cache.tag != tag):
                    # Algorithm-2 style reset: rebuild context KV at the first
                    # denoise step whenever the reconstituted memory changed
                    self.cache = encode_context(self.params, cfg, ctx, positions[:-1],
                                                ref_d, self.intrinsics, tag)
                    self.cache_rebuilds += 1
                k_next = self.schedule[s + 1] if s + 1 < len(self.schedule) else 0.0
                v = forward_chunk_cached(self.params, cfg, x, float(k_s), keys, poses_rt,
                                         int(positions[-1]), self.cache, self.intrinsics)
                x = x + np.float32(k_s - k_next) * v
            clean = x
        else:
            clean = denoise_chunk(
                lambda xx, kk: self._reference_forward(xx, kk, ctx, positions, keys, poses_rt),
                self.schedule, x)

        rec = ChunkRecord(latent=clean, poses=list(poses), keys=keys,
                          capture_index=self._next_capture)
        self.bank.append(rec)
        self.last_retrieved = list(ctx.capture_indices())
        self._next_capture += 1
        if self.trace is not None:
            scores = {c.capture_index: relevance(c, poses[1], self.world_size)
                      for c in ctx.spatial}
            self.trace.write(rec.capture_index, ctx, scores, positions)
        self.chunk_times_ms.append((time.perf_counter() - t0) * 1e3)
        return rec

    def _reference_forward(self, x: np.ndarray, k: float, ctx: ContextSet,
                           positions: np.ndarray, keys: int, poses_rt: np.ndarray) -> np.ndarray:
        """Uncached path: full forward over [context, chunk] via the training code."""
        cfg = self.cfg
        cn = len(ctx)
        if cn:
            _, lat, ckeys, cposes = _stack_ctx(ctx, cfg)
            ctx_kwargs = dict(
                ctx=lat[None], ctx_keys=ckeys[None], ctx_poses=cposes[None],
                ctx_valid=np.ones((1, cn), bool), ctx_vis=np.ones((1, 1, cn), bool))
        else:
            ctx_kwargs = {}
        batch = WindowBatch(
            x=x[None, None], k=np.array([[k]], np.float32), keys=np.array([[keys]]),
            poses=poses_rt[None, None], intrinsics=self.intrinsics,
            chunk_pos=np.asarray(positions)[None], bidirectional=False, **ctx_kwargs)
        out = forward(self.params, cfg, batch)
        return out.data[0, 0]

    def frames(self, rec: ChunkRecord):
        return progressive_decode(np.asarray(rec.latent), self.cfg)


def rollout(params: dict, cfg: ModelConfig, first_chunk: ChunkRecord, world_size: float,
            actions: list[tuple[int, list[CameraPose]]], noise_seed: int,
            use_cache: bool = True, schedule: list[float] | None = None,
            trace: MemoryTrace | None = None,
            stream: FrameStream | None = None) -> tuple[list[ChunkRecord], np.ndarray]:
    """Run a full action stream; returns committed chunks and all frames
    (including the conditioning chunk's)."""
    session = RolloutSession(params, cfg, first_chunk, world_size, noise_seed,
                             use_cache=use_cache, trace=trace, schedule=schedule)
    frames = [f for f in progressive_decode(np.asarray(first_chunk.latent), cfg)]
    for keys, poses in actions:
        rec = session.step(keys, poses)
        for f in session.frames(rec):
            frames.append(f)
            if stream is not None:
                stream.put(len(frames) - 1, f)
    if stream is not None:
        stream.close()
    return session.bank.chunks(), np.stack(frames)
