"""Transformer invariants: patchify, masks, neutrality, causality, invariance."""

import math

import numpy as np
import pytest

from streamworld import tensor as T
from streamworld import worldsim as ws
from streamworld.actions import build_dproj, dual_attention, embed_keys, timestep_embedding
from streamworld.data import normalize_frames
from streamworld.model import (ModelConfig, WindowBatch, block_causal_mask, forward,
                               frames_to_chunks, init_params, patchify, rope_angles, unpatchify)
from streamworld.rng import Rng


def tiny_cfg(**kw):
    base = dict(dim=48, heads=2, blocks=2, patch=4, frame_size=16)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg, seed=0, B=1, keys=None):
    rng = Rng(seed)
    W = cfg.window
    x = rng.randn(B, W, cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels, dtype=np.float32)
    k = rng.uniform(size=(B, W)).astype(np.float32)
    if keys is None:
        keys = rng.integers(0, 64, size=(B, W))
    world = ws.generate_world(1, size=10)
    intr = ws.default_intrinsics(cfg.frame_size)
    ep = ws.make_trajectory(world, "random_walk", 4 * W, seed=seed, intrinsics=intr)
    poses = np.stack([[ep.poses[c * 4 + f].rt_matrix() for f in range(4)] for c in range(W)])
    poses = np.broadcast_to(poses, (B,) + poses.shape).copy()
    return WindowBatch(x=x, k=k, keys=np.asarray(keys), poses=poses, intrinsics=intr)


class TestPatchify:
    def test_roundtrip_bit_exact(self):
        frame = Rng(1).integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        toks = patchify(frame, 4)
        assert np.array_equal(unpatchify(toks, 4, 16), frame)

    def test_constant_frame(self):
        frame = np.full((16, 16, 3), 37, np.uint8)
        assert (patchify(frame, 4) == 37).all()

    def test_shapes_64(self):
        frame = np.zeros((64, 64, 3), np.float32)
        toks = patchify(frame, 8)
        assert toks.shape == (64, 192)  # 8x8 token grid, 3 * 8^2 channels

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((15, 16, 3)), 4)


class TestBlockCausalMask:
    def test_single_chunk_no_ctx_all_true(self):
        m = block_causal_mask(1, 0, 256)
        assert m.shape == (256, 256) and m.all()

    def test_two_chunks_past_blind_to_future(self):
        m = block_causal_mask(2, 0, 4)
        assert not m[:4, 4:].any()
        assert m[4:, :4].all() and m[:4, :4].all() and m[4:, 4:].all()

    def test_ctx_visible_to_all_window(self):
        m = block_causal_mask(2, 1, 4)
        assert m[4:, :4].all()          # window rows see context tokens
        assert m[:4, :4].all() and not m[:4, 4:].any()  # ctx rows are chunk-local


class TestZeroInitNeutrality:
    def test_dual_equals_unconditioned_bit_exact(self):
        cfg_dual = tiny_cfg(action_mode="dual")
        cfg_none = tiny_cfg(action_mode="none")
        p_dual = init_params(cfg_dual, seed=3)
        p_none = init_params(cfg_none, seed=3)
        for name, t in p_none.items():  # shared parameters are bit-identical
            assert np.array_equal(t.data, p_dual[name].data), name
        for trial in range(100):
            batch = random_batch(cfg_dual, seed=trial)
            out_dual = forward(p_dual, cfg_dual, batch).data
            out_none = forward(p_none, cfg_none, random_batch(cfg_none, seed=trial)).data
            assert np.array_equal(out_dual, out_none)

    def test_embed_keys_neutral_at_init(self):
        cfg = tiny_cfg(action_mode="dual")
        p = init_params(cfg, seed=4)
        t_emb = Rng(5).randn(3, cfg.dim)
        for keys in (0, 1, 63, 21):
            out = embed_keys(p, np.full(3, keys), t_emb)
            assert np.array_equal(out.data, t_emb)

    def test_idle_key_vector_is_zero_input(self):
        from streamworld.actions import key_bits
        assert (key_bits(np.array([0])) == 0).all()
        assert key_bits(np.array([0])).shape == (1, 6)


class TestDproj:
    def canonical_intr(self):
        return ws.default_intrinsics(64)

    def test_identity_pose_gives_bare_projection(self):
        from streamworld.actions import projection_matrix
        intr = self.canonical_intr()
        pose = ws.CameraPose(rotation=np.eye(3), translation=np.zeros(3), intrinsics=intr)
        d = build_dproj([pose], near=0.25, far=50.0)[0]
        assert np.allclose(d, projection_matrix(intr, 0.25, 50.0))

    def test_identical_cameras_relative_identity(self):
        intr = self.canonical_intr()
        p = ws.CameraPose.from_yaw(3.2, 5.0, 0.9, intr)
        d = build_dproj([p, p])
        rel = d[0] @ np.linalg.inv(d[1])
        assert np.abs(rel - np.eye(4)).max() < 1e-5

    def test_global_rigid_transform_preserves_relative_matrices(self):
        intr = self.canonical_intr()
        rng = Rng(6)
        poses = [ws.CameraPose.from_yaw(float(rng.uniform(1, 9)), float(rng.uniform(1, 9)),
                                        float(rng.uniform(-3, 3)), intr) for _ in range(5)]
        d = build_dproj(poses)
        rel = np.stack([d[i] @ np.linalg.inv(d[j]) for i in range(5) for j in range(5)])
        g_yaw, g_t = 1.1, np.array([4.0, -2.0, 0.7])
        G_r = ws.rotation_from_yaw(g_yaw)
        moved = [ws.CameraPose(rotation=G_r @ p.rotation, translation=G_r @ p.translation + g_t,
                               intrinsics=intr) for p in poses]
        d2 = build_dproj(moved)
        rel2 = np.stack([d2[i] @ np.linalg.inv(d2[j]) for i in range(5) for j in range(5)])
        assert np.abs(rel - rel2).max() < 1e-5

    def test_singular_intrinsics_rejected(self):
        bad = ws.Intrinsics(fx=0.0, fy=32, cx=32, cy=32, width=64, height=64)
        pose = ws.CameraPose(rotation=np.eye(3), translation=np.zeros(3), intrinsics=bad)
        with pytest.raises(ValueError):
            build_dproj([pose])


def _rigid_move(pose, G_r, g_t):
    return ws.CameraPose(rotation=G_r @ pose.rotation,
                         translation=G_r @ pose.translation + g_t,
                         intrinsics=pose.intrinsics)


class TestDualAttention:
    def _setup(self, seed=7, tokens=24, hd=16):
        rng = Rng(seed)
        q = (0.5 * rng.randn(2, tokens, hd)).astype(np.float32)
        k = (0.5 * rng.randn(2, tokens, hd)).astype(np.float32)
        v = (0.5 * rng.randn(2, tokens, hd)).astype(np.float32)
        intr = ws.default_intrinsics(32)
        poses = [ws.CameraPose.from_yaw(float(rng.uniform(1, 9)), float(rng.uniform(1, 9)),
                                        float(rng.uniform(-3, 3)), intr) for _ in range(tokens)]
        angles = np.zeros((tokens, hd // 2))
        mask = np.tril(np.ones((tokens, tokens), bool))
        return q, k, v, poses, angles, mask

    def test_gate_zero_reduces_to_attn1(self):
        q, k, v, poses, angles, mask = self._setup()
        frustums = build_dproj(poses)
        out = dual_attention(q, k, v, angles, frustums, mask, gate=np.float32(0.0))
        ref = T.masked_attention(q, k, v, mask)
        assert np.array_equal(out.data, ref.data)

    def test_identical_cameras_match_plain_attention(self):
        q, k, v, poses, angles, mask = self._setup()
        frustums = build_dproj([poses[0]] * len(poses))
        out = dual_attention(q, k, v, angles, frustums, mask, gate=np.float32(1.0))
        ref = T.add(T.masked_attention(q, k, v, mask), T.masked_attention(q, k, v, mask))
        assert np.abs(out.data - ref.data).max() < 1e-5

    def test_invariant_under_global_rigid_transforms(self):
        q, k, v, poses, angles, mask = self._setup()
        base = dual_attention(q, k, v, angles, build_dproj(poses), mask, gate=np.float32(1.0)).data
        rng = Rng(8)
        for _ in range(20):
            G_r = ws.rotation_from_yaw(float(rng.uniform(-math.pi, math.pi)))
            g_t = rng.randn(3) * 5.0
            moved = [_rigid_move(p, G_r, g_t) for p in poses]
            out = dual_attention(q, k, v, angles, build_dproj(moved), mask, gate=np.float32(1.0)).data
            assert np.abs(out - base).max() < 1e-4

    def test_head_dim_not_divisible_by_4_rejected(self):
        rng = Rng(9)
        q = rng.randn(1, 4, 6)
        poses = [ws.CameraPose.from_yaw(1.5, 1.5, 0.0, ws.default_intrinsics(16))] * 4
        with pytest.raises(ValueError):
            dual_attention(q, q, q, np.zeros((4, 3)), build_dproj(poses),
                           np.ones((4, 4), bool), gate=np.float32(0.0))


class TestForwardCausality:
    def test_future_perturbation_leaves_past_bit_identical(self):
        cfg = tiny_cfg(action_mode="dual", blocks=2)
        params = init_params(cfg, seed=10)
        _randomize(params, seed=11)
        batch = random_batch(cfg, seed=12)
        out1 = forward(params, cfg, batch).data.copy()
        x2 = np.array(batch.x)
        x2[:, 3] += 1.0  # perturb the last chunk
        batch2 = WindowBatch(x=x2, k=batch.k, keys=batch.keys, poses=batch.poses,
                             intrinsics=batch.intrinsics, chunk_pos=batch.chunk_pos)
        out2 = forward(params, cfg, batch2).data
        assert np.array_equal(out1[:, :3], out2[:, :3])
        assert not np.array_equal(out1[:, 3], out2[:, 3])

    def test_future_gradients_exactly_zero(self):
        cfg = tiny_cfg(action_mode="dual", blocks=2)
        params = init_params(cfg, seed=13)
        _randomize(params, seed=14)
        batch = random_batch(cfg, seed=15)
        x = T.Tensor(np.array(batch.x), requires_grad=True)
        batch.x = x
        with T.Tape() as tape:
            out = forward(params, cfg, batch)
            chunk1 = T.slice_axis(out, 1, 1, 2)  # loss on chunk index 1
            loss = T.mean(T.mul(chunk1, chunk1))
            grads = tape.backward(loss)
        g = grads[x]
        assert np.all(g[:, 2:] == 0.0)
        assert np.abs(g[:, :2]).max() > 0.0

    def test_bidirectional_mode_sees_future(self):
        cfg = tiny_cfg(action_mode="dual", blocks=2)
        params = init_params(cfg, seed=16)
        _randomize(params, seed=17)
        batch = random_batch(cfg, seed=18)
        batch.bidirectional = True
        out1 = forward(params, cfg, batch).data.copy()
        x2 = np.array(batch.x)
        x2[:, 3] += 1.0
        batch2 = WindowBatch(x=x2, k=batch.k, keys=batch.keys, poses=batch.poses,
                             intrinsics=batch.intrinsics, chunk_pos=batch.chunk_pos,
                             bidirectional=True)
        out2 = forward(params, cfg, batch2).data
        assert not np.array_equal(out1[:, 0], out2[:, 0])


class TestRopeAngles:
    def test_axis_split(self):
        cfg = tiny_cfg()
        ang = rope_angles(cfg, np.array([0, 1]))
        pairs = cfg.head_dim // 2
        assert ang.shape == (2 * cfg.tokens_per_chunk, pairs)
        # token 0 of chunk 0 sits at the origin: all angles zero
        assert np.abs(ang[0]).max() == 0.0

    def test_timestep_embedding_shape(self):
        e = timestep_embedding(np.array([0.0, 0.5, 1.0]), 48)
        assert e.shape == (3, 48)
        assert np.abs(e[0] - np.concatenate([np.ones(24), np.zeros(24)])).max() < 1e-6


def _randomize(params, seed, scale=0.05):
    r = Rng(seed)
    for n, p in params.items():
        p.data = (scale * r.child(n).randn(*p.shape, dtype=np.float64)).astype(np.float32)


class TestNoisePath:
    def test_identities(self):
        from streamworld.model import NoisePath
        rng = Rng(19)
        z0 = rng.randn(1, 2, 4, 4, 12, dtype=np.float32)
        z1 = rng.randn(1, 2, 4, 4, 12, dtype=np.float32)
        for kval in (0.0, 0.3, 1.0):
            k = np.full((1, 2), kval, np.float32)
            p = NoisePath(z0=z0, z1=z1, k=k)
            if kval == 0.0:
                assert np.allclose(p.z_k, z0, atol=1e-7)
            if kval == 1.0:
                assert np.allclose(p.z_k, z1, atol=1e-7)
            recon = p.z_k + kval * p.velocity
            assert np.abs(recon - z0).max() < 1e-6
