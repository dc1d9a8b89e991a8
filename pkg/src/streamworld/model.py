"""Chunk-wise autoregressive diffusion transformer.

Frames are patchified losslessly into token grids (the stand-in for a video
VAE, compression 1). The transformer runs on a flat token sequence
[context chunks..., window chunks...] with a chunk-granular attention mask:
context chunks attend only within themselves (so their features never depend
on which other chunks were retrieved, which is what makes the KV cache and
teacher/student context alignment exact), while window chunks see their own
retrieved context plus earlier window chunks (block-causal) or the whole
window (bidirectional pretraining).

Conditioning is adaLN-style: per-chunk noise level plus discrete keys drive
shift/scale/gate modulation of every block; per-frame camera poses enter the
attention as projective frustum matrices behind a zero-init gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .actions import (build_dproj_rt, embed_keys, key_bits, projective_attention,
                      relative_frustums, timestep_embedding)
from .rng import Rng
from .worldsim import Intrinsics, default_intrinsics

ACTION_MODES = ("none", "discrete", "continuous", "dual")


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    blocks: int = 6
    patch: int = 8
    frame_size: int = 64
    chunk_frames: int = 4
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    temporal_ctx: int = 3      # L most recent chunks
    spatial_ctx: int = 1       # K retrieved chunks
    action_mode: str = "dual"
    reframe_mode: str = "reframed"  # or "absolute"
    teacher_steps: int = 20
    student_steps: int = 4
    near: float = 0.25
    far: float = 50.0
    window: int = 4            # chunks per training sequence

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must divide evenly into heads")
        hd = self.dim // self.heads
        if hd % 8 != 0:
            raise ValueError("head dim must be divisible by 8 (4-vector groups + 3-axis rotary split)")
        if self.frame_size % self.patch != 0:
            raise ValueError("frame size must be divisible by patch")
        if self.action_mode not in ACTION_MODES:
            raise ValueError(f"unknown action mode '{self.action_mode}'")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def tokens_per_chunk(self) -> int:
        return self.tokens_per_frame * self.chunk_frames

    @property
    def channels(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def use_keys(self) -> bool:
        return self.action_mode in ("discrete", "dual")

    @property
    def use_poses(self) -> bool:
        return self.action_mode in ("continuous", "dual")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


# ---------------------------------------------------------------------------
# patchify (fixed lossless VAE substitute)


def patchify(frame: np.ndarray, patch: int) -> np.ndarray:
    """(h, w, 3) -> (tokens, 3*patch^2), lossless rearrangement."""
    h, w, c = frame.shape
    if h % patch or w % patch:
        raise ValueError("frame dims must be divisible by patch")
    gh, gw = h // patch, w // patch
    x = frame.reshape(gh, patch, gw, patch, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * gw, patch * patch * c))


def unpatchify(tokens: np.ndarray, patch: int, frame_size: int) -> np.ndarray:
    g = frame_size // patch
    x = tokens.reshape(g, g, patch, patch, 3)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(frame_size, frame_size, 3))


def frames_to_chunks(frames_norm: np.ndarray, patch: int) -> np.ndarray:
    """(L, h, w, 3) normalized frames -> (L/4, 4, tokens, channels)."""
    toks = np.stack([patchify(f, patch) for f in frames_norm])
    L, P, C = toks.shape
    return toks.reshape(L // 4, 4, P, C)


# ---------------------------------------------------------------------------
# flow-matching noise path


@dataclass
class NoisePath:
    """Linear interpolation path: z_k = (1-k) z0 + k z1, velocity v = z0 - z1.

    k=1 is pure noise, so sampling starts from N(0, I); z0 = z_k + k v
    reconstructs the clean sample identically for any k.
    """

    z0: np.ndarray
    z1: np.ndarray
    k: np.ndarray  # per-chunk, broadcast over (F, P, C)

    @property
    def z_k(self) -> np.ndarray:
        k = self.k[..., None, None, None]
        return ((1.0 - k) * self.z0 + k * self.z1).astype(np.float32)

    @property
    def velocity(self) -> np.ndarray:
        return (self.z0 - self.z1).astype(np.float32)


# ---------------------------------------------------------------------------
# parameters


def _normal(rng: Rng, shape, std=0.02, dtype=np.float32):
    return T.Tensor(rng.randn(*shape, dtype=np.float64).astype(dtype) * std, requires_grad=True)


def _zeros(shape, dtype=np.float32):
    return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, T.Tensor]:
    """Per-name seeded init: parameters shared between action-mode variants
    are bit-identical for the same seed, so a freshly initialized conditioned
    model is function-identical to the unconditioned one."""
    base = Rng(seed)

    def normal(name, shape, std=0.02):
        r = base.child("param", name)
        return T.Tensor(r.randn(*shape, dtype=np.float64).astype(dtype) * std, requires_grad=True)

    p: dict[str, T.Tensor] = {}
    d, C = cfg.dim, cfg.channels
    p["patch_in.w"] = normal("patch_in.w", (C, d))
    p["patch_in.b"] = _zeros((d,), dtype)
    p["time_mlp.w1"] = normal("time_mlp.w1", (d, d))
    p["time_mlp.b1"] = _zeros((d,), dtype)
    p["time_mlp.w2"] = normal("time_mlp.w2", (d, d))
    p["time_mlp.b2"] = _zeros((d,), dtype)
    if cfg.use_keys:
        p["key_table"] = normal("key_table", (6, d))
        p["key_mlp.w1"] = normal("key_mlp.w1", (d, d))
        p["key_mlp.b1"] = _zeros((d,), dtype)
        p["key_mlp.w2"] = _zeros((d, d), dtype)  # zero-init output: neutral at start
        p["key_mlp.b2"] = _zeros((d,), dtype)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            p[pre + f"attn.{nm}"] = normal(pre + f"attn.{nm}", (d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            p[pre + f"attn.{nm}"] = _zeros((d,), dtype)
        if cfg.use_poses:
            p[pre + "attn.pose_gate"] = _zeros((), dtype)
        p[pre + "mod.w"] = _zeros((d, 6 * d), dtype)  # adaLN-zero
        p[pre + "mod.b"] = _zeros((6 * d,), dtype)
        p[pre + "mlp.w1"] = normal(pre + "mlp.w1", (d, hidden))
        p[pre + "mlp.b1"] = _zeros((hidden,), dtype)
        p[pre + "mlp.w2"] = normal(pre + "mlp.w2", (hidden, d))
        p[pre + "mlp.b2"] = _zeros((d,), dtype)
    p["final.mod.w"] = _zeros((d, 2 * d), dtype)
    p["final.mod.b"] = _zeros((2 * d,), dtype)
    p["final.head.w"] = _zeros((d, C), dtype)
    p["final.head.b"] = _zeros((C,), dtype)
    return p


# ---------------------------------------------------------------------------
# masks and positions


def block_causal_mask(n_chunks: int, ctx_chunks: int, tokens_per_chunk: int) -> np.ndarray:
    """Token mask: window chunk i sees chunks <= i within the window plus all
    context tokens; context chunks are self-contained (attend within
    themselves only); nothing ever sees a later window chunk."""
    nc = ctx_chunks + n_chunks
    m = np.zeros((nc, nc), dtype=bool)
    for c in range(ctx_chunks):
        m[c, c] = True
    for i in range(n_chunks):
        row = ctx_chunks + i
        m[row, :ctx_chunks] = True
        m[row, ctx_chunks: ctx_chunks + i + 1] = True
    return np.repeat(np.repeat(m, tokens_per_chunk, axis=0), tokens_per_chunk, axis=1)


def chunk_visibility_mask(ctx_valid: np.ndarray, ctx_vis: np.ndarray,
                          bidirectional: bool) -> np.ndarray:
    """Chunk-level mask (B, NC, NC) with per-window-chunk context visibility.

    ctx_valid: (B, Cn) real-vs-padding flags; ctx_vis: (B, W, Cn) which
    retrieved chunks each window chunk may see.
    """
    B, W, Cn = ctx_vis.shape
    nc = Cn + W
    m = np.zeros((B, nc, nc), dtype=bool)
    idx = np.arange(Cn)
    m[:, idx, idx] = True  # context chunks: own chunk only
    for w in range(W):
        row = Cn + w
        m[:, row, :Cn] = ctx_vis[:, w, :] & ctx_valid
        if bidirectional:
            m[:, row, Cn:] = True
        else:
            m[:, row, Cn: Cn + w + 1] = True
    return m


def expand_mask_tokens(chunk_mask: np.ndarray, tokens_per_chunk: int) -> np.ndarray:
    return np.repeat(np.repeat(chunk_mask, tokens_per_chunk, axis=-2), tokens_per_chunk, axis=-1)


def rope_angles(cfg: ModelConfig, chunk_pos: np.ndarray) -> np.ndarray:
    """Per-token rotary angles: temporal axis gets half the pairs, token-grid
    x/y a quarter each. chunk_pos: (..., NC) -> (..., T, pairs)."""
    pairs = cfg.head_dim // 2
    pt, ps = pairs // 2, pairs // 4
    F, P, g = cfg.chunk_frames, cfg.tokens_per_frame, cfg.grid
    pos = np.asarray(chunk_pos, dtype=np.float64)
    t_fine = (pos[..., :, None] * F + np.arange(F)).reshape(*pos.shape[:-1], -1)
    t_fine = np.repeat(t_fine, P, axis=-1)  # (..., NC*F*P)
    tok = np.arange(P)
    gx = np.tile(np.tile(tok % g, F), pos.shape[-1])
    gy = np.tile(np.tile(tok // g, F), pos.shape[-1])
    freq_t = cfg.rope_base ** (-np.arange(pt) / pt)
    freq_s = cfg.rope_base ** (-np.arange(ps) / ps)
    ang_t = t_fine[..., None] * freq_t
    ang_x = gx[..., None] * freq_s
    ang_y = gy[..., None] * freq_s
    shape = t_fine.shape + (ps,)
    return np.concatenate([ang_t, np.broadcast_to(ang_x, shape), np.broadcast_to(ang_y, shape)], axis=-1)


# ---------------------------------------------------------------------------
# sequence batch


@dataclass
class WindowBatch:
    """One forward pass worth of sequence data.

    x: (B, W, F, P, C) noisy window latents (Tensor or ndarray)
    k: (B, W) per-chunk noise levels; keys: (B, W) bitmasks
    poses: (B, W, F, 3, 4) camera-to-world [R|T] per frame
    ctx*: the retrieved clean context, padded to a fixed chunk count
    chunk_pos: (B, Cn + W) positional chunk indices (reframed or absolute)
    ctx_vis: (B, W, Cn) per-window-chunk context visibility
    """

    x: object
    k: np.ndarray
    keys: np.ndarray
    poses: np.ndarray
    intrinsics: Intrinsics
    ctx: object | None = None
    ctx_keys: np.ndarray | None = None
    ctx_poses: np.ndarray | None = None
    ctx_valid: np.ndarray | None = None
    chunk_pos: np.ndarray | None = None
    ctx_vis: np.ndarray | None = None
    bidirectional: bool = False

    @property
    def batch(self) -> int:
        return self.k.shape[0]

    @property
    def n_window(self) -> int:
        return self.k.shape[1]

    @property
    def n_ctx(self) -> int:
        return 0 if self.ctx_valid is None else self.ctx_valid.shape[1]


def _empty_ctx(batch: "WindowBatch", cfg: ModelConfig) -> "WindowBatch":
    B, W = batch.batch, batch.n_window
    if batch.ctx_valid is None:
        batch.ctx = np.zeros((B, 0, cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels), np.float32)
        batch.ctx_keys = np.zeros((B, 0), np.int64)
        batch.ctx_poses = np.zeros((B, 0, cfg.chunk_frames, 3, 4))
        batch.ctx_valid = np.zeros((B, 0), bool)
        batch.ctx_vis = np.zeros((B, W, 0), bool)
    if batch.chunk_pos is None:
        Cn = batch.ctx_valid.shape[1]
        batch.chunk_pos = np.broadcast_to(np.arange(Cn + W), (B, Cn + W)).copy()
    return batch


# ---------------------------------------------------------------------------
# forward


def _chunk_cond(params: dict, cfg: ModelConfig, k_all: np.ndarray, keys_all: np.ndarray) -> T.Tensor:
    """Per-chunk conditioning vector: timestep embedding (+ key branch)."""
    t_sin = timestep_embedding(k_all.reshape(-1), cfg.dim)
    t = T.silu(T.add(T.matmul(T.Tensor(t_sin), params["time_mlp.w1"]), params["time_mlp.b1"]))
    t = T.add(T.matmul(t, params["time_mlp.w2"]), params["time_mlp.b2"])
    if cfg.use_keys:
        return embed_keys(params, keys_all.reshape(-1), t)
    return t


def _qkv(params: dict, prefix: str, hmod: T.Tensor, B: int, Tn: int, H: int, hd: int):
    outs = []
    for nm in ("q", "k", "v"):
        y = T.add(T.matmul(hmod, params[prefix + f"attn.w{nm}"]), params[prefix + f"attn.b{nm}"])
        y = T.reshape(y, (B, Tn, H, hd))
        outs.append(T.transpose(y, (0, 2, 1, 3)))
    return outs


def _modulate(x: T.Tensor, shift: T.Tensor, scale: T.Tensor) -> T.Tensor:
    return T.add(T.mul(x, T.add(scale, np.float32(1.0))), shift)


def window_bias(ctx_valid: np.ndarray, ctx_vis: np.ndarray, bidirectional: bool,
                tokens_per_chunk: int) -> np.ndarray:
    """Additive mask bias for window-token query rows over the full sequence
    [ctx tokens..., window tokens...]: shape (B, 1, W*tpc, T)."""
    B, W, Cn = ctx_vis.shape
    m = np.zeros((B, W, Cn + W), dtype=bool)
    m[:, :, :Cn] = ctx_vis & ctx_valid[:, None, :]
    if bidirectional:
        m[:, :, Cn:] = True
    else:
        m[:, :, Cn:] = np.tril(np.ones((W, W), bool))[None]
    tok = np.repeat(np.repeat(m, tokens_per_chunk, axis=1), tokens_per_chunk, axis=2)
    return T.mask_bias(tok)[:, None, :, :]


def _split_heads(x: T.Tensor, B: int, Tn: int, H: int, hd: int) -> T.Tensor:
    return T.transpose(T.reshape(x, (B, Tn, H, hd)), (0, 2, 1, 3))


def _ctx_view(x: T.Tensor, B: int, Cn: int, tpc: int, H: int, hd: int) -> T.Tensor:
    """(B, H, T, hd) -> (B*Cn, H, tpc, hd): context chunks as a batch axis,
    so context attention is chunk-local by construction."""
    c = T.slice_axis(x, 2, 0, Cn * tpc)
    c = T.reshape(T.transpose(c, (0, 2, 1, 3)), (B * Cn, tpc, H, hd))
    return T.transpose(c, (0, 2, 1, 3))


def _unview(ctx_attn: T.Tensor, win_attn: T.Tensor, B, Cn, W, tpc, D) -> T.Tensor:
    parts = []
    if Cn:
        c = T.transpose(ctx_attn, (0, 2, 1, 3))        # (B*Cn, tpc, H, hd)
        parts.append(T.reshape(c, (B, Cn * tpc, D)))
    wattn = T.transpose(win_attn, (0, 2, 1, 3))        # (B, Wt, H, hd)
    parts.append(T.reshape(wattn, (B, W * tpc, D)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def forward(params: dict, cfg: ModelConfig, batch: WindowBatch) -> T.Tensor:
    """Velocity prediction for the window chunks: (B, W, F, P, C)."""
    batch = _empty_ctx(batch, cfg)
    B, W, Cn = batch.batch, batch.n_window, batch.n_ctx
    F, P, C, D = cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels, cfg.dim
    tpc = cfg.tokens_per_chunk
    NC = Cn + W
    Tn = NC * tpc
    Wt = W * tpc

    win_tok = T.reshape(T._wrap(batch.x), (B, Wt, C))
    if Cn:
        ctx_tok = T.reshape(T._wrap(batch.ctx), (B, Cn * tpc, C))
        tokens = T.concat([ctx_tok, win_tok], axis=1)
    else:
        tokens = win_tok
    h = T.add(T.matmul(tokens, params["patch_in.w"]), params["patch_in.b"])

    # conditioning: context chunks are clean (k = 0) with their own keys
    k_all = np.concatenate([np.zeros((B, Cn), np.float32), batch.k.astype(np.float32)], axis=1)
    keys_all = np.concatenate([batch.ctx_keys, batch.keys], axis=1).astype(np.int64)
    cond = T.silu(_chunk_cond(params, cfg, k_all, keys_all))   # (B*NC, D)

    bias = window_bias(batch.ctx_valid, batch.ctx_vis, batch.bidirectional, tpc)

    ang_all = rope_angles(cfg, batch.chunk_pos)[:, None, :, :]  # (B, 1, T, pairs)

    dmats = None
    if cfg.use_poses:
        all_poses = np.concatenate([batch.ctx_poses, batch.poses], axis=1)  # (B, NC, F, 3, 4)
        dproj = build_dproj_rt(all_poses.reshape(B, NC * F, 3, 4), batch.intrinsics,
                               cfg.near, cfg.far)
        dproj = np.repeat(dproj, P, axis=1)                    # (B, T, 4, 4)
        drel = relative_frustums(dproj)                        # ref: last window token
        dmats = (np.swapaxes(drel, -1, -2).astype(np.float32),
                 np.linalg.inv(drel).astype(np.float32),
                 drel.astype(np.float32))

    H, hd = cfg.heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(hd))
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        mod = T.add(T.matmul(cond, params[pre + "mod.w"]), params[pre + "mod.b"])
        mod = T.repeat_interleave(T.reshape(mod, (B, NC, 6 * D)), tpc, axis=1)
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = (
            T.slice_axis(mod, 2, j * D, (j + 1) * D) for j in range(6))

        hn = _modulate(T.layernorm(h), sh_a, sc_a)
        q, k, v = _qkv(params, pre, hn, B, Tn, H, hd)          # (B, H, T, hd)
        q1 = T.rotate_pairs(q, ang_all)
        k1 = T.rotate_pairs(k, ang_all)
        qw = T.slice_axis(q1, 2, Cn * tpc, Tn)
        logits = T.matmul(T.mul(qw, scale), T.transpose(k1, (0, 1, 3, 2)))
        win_attn = T.matmul(T.softmax(T.add(logits, bias)), v)
        if Cn:
            cq = _ctx_view(q1, B, Cn, tpc, H, hd)
            ck = _ctx_view(k1, B, Cn, tpc, H, hd)
            cv = _ctx_view(v, B, Cn, tpc, H, hd)
            ctx_attn = T.matmul(T.softmax(T.matmul(T.mul(cq, scale), T.transpose(ck, (0, 1, 3, 2)))), cv)
        else:
            ctx_attn = None
        if dmats is not None:
            a2_ctx, a2_win = _frustum_attention(q, k, v, dmats, bias, scale, B, Cn, W, tpc, H, hd)
            gate = params[pre + "attn.pose_gate"]
            win_attn = T.add(win_attn, T.mul(a2_win, gate))
            if Cn:
                ctx_attn = T.add(ctx_attn, T.mul(a2_ctx, gate))
        merged = _unview(ctx_attn, win_attn, B, Cn, W, tpc, D) if Cn else \
            T.reshape(T.transpose(win_attn, (0, 2, 1, 3)), (B, Wt, D))
        a = T.add(T.matmul(merged, params[pre + "attn.wo"]), params[pre + "attn.bo"])
        h = T.add(h, T.mul(a, g_a))

        hn2 = _modulate(T.layernorm(h), sh_m, sc_m)
        m1 = T.silu(T.add(T.matmul(hn2, params[pre + "mlp.w1"]), params[pre + "mlp.b1"]))
        m2 = T.add(T.matmul(m1, params[pre + "mlp.w2"]), params[pre + "mlp.b2"])
        h = T.add(h, T.mul(m2, g_m))

    fmod = T.add(T.matmul(cond, params["final.mod.w"]), params["final.mod.b"])
    fmod = T.repeat_interleave(T.reshape(fmod, (B, NC, 2 * D)), tpc, axis=1)
    shift, scale_f = T.slice_axis(fmod, 2, 0, D), T.slice_axis(fmod, 2, D, 2 * D)
    out = _modulate(T.layernorm(h), shift, scale_f)
    out = T.add(T.matmul(out, params["final.head.w"]), params["final.head.b"])
    out = T.slice_axis(out, 1, Cn * tpc, Tn)
    return T.reshape(out, (B, W, F, P, C))


def _frustum_attention(q, k, v, dmats, bias, scale, B, Cn, W, tpc, H, hd):
    """The projective branch, split the same way: chunk-local context rows,
    window rows over the full sequence; independent softmax, shared mask."""
    d_t, d_inv, d_fwd = dmats
    q2 = _flatten4(T.apply_mats4(_group4(q), d_t))
    k2 = _flatten4(T.apply_mats4(_group4(k), d_inv))
    v2 = _flatten4(T.apply_mats4(_group4(v), d_inv))
    Tn = (Cn + W) * tpc
    qw = T.slice_axis(q2, 2, Cn * tpc, Tn)
    logits = T.matmul(T.mul(qw, scale), T.transpose(k2, (0, 1, 3, 2)))
    a_win = T.matmul(T.softmax(T.add(logits, bias)), v2)
    d_fwd_win = d_fwd[:, Cn * tpc:]
    a_win = _flatten4(T.apply_mats4(_group4(a_win), d_fwd_win))
    a_ctx = None
    if Cn:
        cq = _ctx_view(q2, B, Cn, tpc, H, hd)
        ck = _ctx_view(k2, B, Cn, tpc, H, hd)
        cv = _ctx_view(v2, B, Cn, tpc, H, hd)
        a_ctx = T.matmul(T.softmax(T.matmul(T.mul(cq, scale), T.transpose(ck, (0, 1, 3, 2)))), cv)
        d_fwd_ctx = d_fwd[:, : Cn * tpc].reshape(B * Cn, tpc, 4, 4)
        a_ctx = _flatten4(T.apply_mats4(_group4(a_ctx), d_fwd_ctx))
    return a_ctx, a_win


def _group4(x: T.Tensor) -> T.Tensor:
    s = x.shape
    return T.reshape(x, s[:-1] + (s[-1] // 4, 4))


def _flatten4(x: T.Tensor) -> T.Tensor:
    s = x.shape
    return T.reshape(x, s[:-2] + (s[-2] * 4,))
