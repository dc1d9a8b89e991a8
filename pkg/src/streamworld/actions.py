"""Dual action representation.

Discrete keys are summed per-bit into a learned table, pushed through a
zero-initialized MLP, and added to the timestep embedding that modulates the
transformer blocks. Continuous camera poses enter self-attention as
projective frustum matrices: per-token 4x4 maps applied to homogeneous
4-vector groups of the head dim, so attention logits see only relative
camera geometry (invariant to any global rigid transform of all extrinsics).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .worldsim import CameraPose, Intrinsics

N_KEYS = 6  # forward, back, strafe_left, strafe_right, turn_left, turn_right


def key_bits(keys: np.ndarray) -> np.ndarray:
    """Bitmask array -> (..., 6) float indicator vectors (idle maps to zeros)."""
    keys = np.asarray(keys, dtype=np.int64)
    bits = (keys[..., None] >> np.arange(N_KEYS)) & 1
    return bits.astype(np.float32)


def timestep_embedding(k: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal embedding of noise level k in [0, 1]."""
    if dim % 2 != 0:
        raise ValueError("timestep embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(k, dtype=np.float64)[..., None] * scale * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(np.float32)


def embed_keys(params: dict, keys: np.ndarray, t_emb) -> T.Tensor:
    """ActionEmbedding: t_emb + zero-init-MLP(key table summed over set bits).

    At initialization the MLP output layer is zero, so the result equals the
    bare timestep embedding exactly.
    """
    bits = key_bits(keys)
    flat_bits = bits.reshape(-1, N_KEYS)
    h = T.matmul(T.Tensor(flat_bits), params["key_table"])
    h = T.silu(T.add(T.matmul(h, params["key_mlp.w1"]), params["key_mlp.b1"]))
    h = T.add(T.matmul(h, params["key_mlp.w2"]), params["key_mlp.b2"])
    t = t_emb if isinstance(t_emb, T.Tensor) else T.Tensor(t_emb)
    return T.add(T.reshape(t, (-1, t.shape[-1])), h)


def projection_matrix(intr: Intrinsics, near: float, far: float) -> np.ndarray:
    """Invertible 4x4 NDC projection from pinhole intrinsics."""
    if intr.fx == 0 or intr.fy == 0:
        raise ValueError("singular intrinsics")
    w, h = intr.width, intr.height
    return np.array([
        [2 * intr.fx / w, 0.0, 2 * intr.cx / w - 1.0, 0.0],
        [0.0, 2 * intr.fy / h, 2 * intr.cy / h - 1.0, 0.0],
        [0.0, 0.0, (far + near) / (far - near), -2 * far * near / (far - near)],
        [0.0, 0.0, 1.0, 0.0],
    ], dtype=np.float64)


def world_to_cam_matrix(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    m = np.eye(4, dtype=np.float64)
    m[:3, :3] = rotation.T
    m[:3, 3] = -rotation.T @ translation
    return m


def build_dproj(poses: list[CameraPose], near: float = 0.25, far: float = 50.0) -> np.ndarray:
    """Per-frame projective frustum matrices: NDC-projection x world-to-camera."""
    out = np.empty((len(poses), 4, 4), dtype=np.float64)
    for i, p in enumerate(poses):
        out[i] = projection_matrix(p.intrinsics, near, far) @ world_to_cam_matrix(p.rotation, p.translation)
    return out


def build_dproj_rt(rt: np.ndarray, intr: Intrinsics, near: float = 0.25, far: float = 50.0) -> np.ndarray:
    """Vectorized variant over (..., 3, 4) [R|T] pose arrays."""
    proj = projection_matrix(intr, near, far)
    lead = rt.shape[:-2]
    flat = rt.reshape(-1, 3, 4)
    out = np.empty((flat.shape[0], 4, 4), dtype=np.float64)
    for i, m in enumerate(flat):
        out[i] = proj @ world_to_cam_matrix(m[:, :3], m[:, 3])
    return out.reshape(*lead, 4, 4)


def relative_frustums(dmats: np.ndarray, ref_index: int = -1) -> np.ndarray:
    """Right-multiply every D by inv(D_ref).

    The relative products D_i D_j^-1 are unchanged in exact arithmetic, but
    entries stay O(1) for nearby cameras, which keeps fp32 attention stable.
    """
    ref = dmats.reshape(-1, 4, 4)[ref_index] if dmats.ndim == 3 else dmats[..., ref_index, :, :]
    if dmats.ndim == 3:
        return dmats @ np.linalg.inv(ref)
    return np.einsum("btij,bjk->btik", dmats, np.linalg.inv(ref))


def dual_attention(q, k, v, rope_angles: np.ndarray, frustums: np.ndarray,
                   mask: np.ndarray, gate) -> T.Tensor:
    """Attn1 + gate * Attn2.

    Attn1 is masked attention over rotary-encoded q/k. Attn2 applies the
    per-token frustum matrices to homogeneous 4-vector groups of q, k, and v
    (transpose for q, inverse for k/v, forward for the output) with its own
    softmax over the same mask. `gate` is the learned scalar, zero at init.

    q, k, v: (H, T, hd) or (B, H, T, hd); frustums: (T, 4, 4) / (B, T, 4, 4).
    """
    q = T._wrap(q)
    hd = q.shape[-1]
    if hd % 4 != 0:
        raise ValueError("head dim must be divisible by 4 for homogeneous grouping")
    q1 = T.rotate_pairs(q, rope_angles)
    k1 = T.rotate_pairs(T._wrap(k), rope_angles)
    attn1 = T.masked_attention(q1, k1, v, mask)

    drel = relative_frustums(np.asarray(frustums, dtype=np.float64))
    d_t = np.swapaxes(drel, -1, -2).astype(np.float32)
    d_inv = np.linalg.inv(drel).astype(np.float32)
    d_fwd = drel.astype(np.float32)
    attn2 = projective_attention(q, k, v, d_t, d_inv, d_fwd, mask)
    return T.add(attn1, T.mul(attn2, gate))


def _grouped(x: T.Tensor) -> T.Tensor:
    shape = x.shape
    return T.reshape(x, shape[:-1] + (shape[-1] // 4, 4))


def _flat(x: T.Tensor) -> T.Tensor:
    shape = x.shape
    return T.reshape(x, shape[:-2] + (shape[-2] * 4,))


def projective_attention(q, k, v, d_t: np.ndarray, d_inv: np.ndarray, d_fwd: np.ndarray,
                         mask: np.ndarray) -> T.Tensor:
    """The frustum branch alone: D applied per token to 4-vector groups."""
    q2 = _flat(T.apply_mats4(_grouped(T._wrap(q)), d_t))
    k2 = _flat(T.apply_mats4(_grouped(T._wrap(k)), d_inv))
    v2 = _flat(T.apply_mats4(_grouped(T._wrap(v)), d_inv))
    out = T.masked_attention(q2, k2, v2, mask)
    return _flat(T.apply_mats4(_grouped(out), d_fwd))
