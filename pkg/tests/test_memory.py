"""Retrieval scoring, reconstitution, and temporal reframing."""

import math

import numpy as np
import pytest

from streamworld import memory as mem
from streamworld import worldsim as ws
from streamworld.rng import Rng


def random_pose(rng, extent=10.0):
    x = float(rng.uniform(0.5, extent))
    y = float(rng.uniform(0.5, extent))
    yaw = float(rng.uniform(-math.pi, math.pi))
    return ws.CameraPose.from_yaw(x, y, yaw, ws.default_intrinsics(32))


def make_chunk(rng, idx, extent=10.0):
    pose = random_pose(rng, extent)
    return mem.ChunkRecord(latent=np.zeros((4, 1, 1), dtype=np.float32),
                           poses=[pose] * 4, keys=0, capture_index=idx)


def mc_overlap(a, b, n=100_000, seed=0):
    """Dense Monte-Carlo oracle over the same frustum measure."""
    rng = Rng(seed)
    intr = a.intrinsics
    u = rng.uniform(0, intr.width, size=n)
    v = rng.uniform(0, intr.height, size=n)
    d = np.asarray(mem.OVERLAP_DEPTHS)[rng.integers(0, 3, size=n)]
    cam = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=1)
    pts = cam @ a.rotation.T + a.translation
    return mem.visible_fraction(pts, b)


class TestFovOverlap:
    def test_self_overlap_is_exactly_one(self):
        rng = Rng(1)
        for _ in range(10):
            p = random_pose(rng)
            assert mem.fov_overlap(p, p) == 1.0

    def test_opposite_direction_zero(self):
        p = ws.CameraPose.from_yaw(4.0, 4.0, 0.7, ws.default_intrinsics(32))
        q = ws.CameraPose.from_yaw(4.0, 4.0, 0.7 + math.pi, ws.default_intrinsics(32))
        assert mem.fov_overlap(p, q) == 0.0

    def test_against_monte_carlo(self):
        rng = Rng(2)
        for i in range(20):
            a, b = random_pose(rng), random_pose(rng)
            det = mem.fov_overlap(a, b)
            oracle = mc_overlap(a, b, n=100_000, seed=i)
            assert abs(det - oracle) < 0.05


class TestRelevance:
    def test_candidate_at_current_pose_scores_one(self):
        p = random_pose(Rng(3))
        rec = mem.ChunkRecord(latent=None, poses=[p] * 4, keys=0, capture_index=0)
        assert mem.relevance(rec, p, world_size=24.0) == 1.0

    def test_zero_overlap_zero_score(self):
        p = ws.CameraPose.from_yaw(4.0, 4.0, 0.0, ws.default_intrinsics(32))
        q = ws.CameraPose.from_yaw(4.1, 4.0, math.pi, ws.default_intrinsics(32))
        rec = mem.ChunkRecord(latent=None, poses=[q] * 4, keys=0, capture_index=0)
        assert mem.relevance(rec, p, world_size=24.0) == 0.0

    def test_top1_matches_exhaustive_enumeration(self):
        rng = Rng(4)
        for trial in range(20):
            chunks = [make_chunk(rng.child(trial, i), i) for i in range(24)]
            cur = random_pose(rng.child(trial, "cur"))
            scores = [mem.relevance(c, cur, 24.0) for c in chunks]
            best = max(range(24), key=lambda i: (scores[i], chunks[i].capture_index))
            bank = mem.MemoryBank()
            for c in chunks:
                bank.append(c)
            ctx = mem.reconstitute(bank, cur, L=0, K=1, world_size=24.0, threshold=-1.0)
            assert ctx.spatial[0].capture_index == best


class TestReconstitute:
    def _bank(self, n, seed=5):
        rng = Rng(seed)
        bank = mem.MemoryBank()
        for i in range(n):
            bank.append(make_chunk(rng.child(i), i))
        return bank

    def test_small_bank_all_temporal(self):
        bank = self._bank(2)
        ctx = mem.reconstitute(bank, random_pose(Rng(6)), L=3, K=1, world_size=24.0)
        assert [c.capture_index for c in ctx.temporal] == [0, 1]
        assert ctx.spatial == []

    def test_default_sizes_match_expected(self):
        bank = self._bank(12)
        ctx = mem.reconstitute(bank, random_pose(Rng(7)), L=3, K=1, world_size=24.0)
        assert len(ctx.temporal) == 3
        assert len(ctx.spatial) <= 1
        assert [c.capture_index for c in ctx.temporal] == [9, 10, 11]

    def test_threshold_filters(self):
        # all candidates face away from the query: nothing exceeds threshold
        intr = ws.default_intrinsics(32)
        bank = mem.MemoryBank()
        for i in range(8):
            p = ws.CameraPose.from_yaw(4.0, 4.0, math.pi, intr)
            bank.append(mem.ChunkRecord(latent=None, poses=[p] * 4, keys=0, capture_index=i))
        cur = ws.CameraPose.from_yaw(4.05, 4.0, 0.0, intr)
        ctx = mem.reconstitute(bank, cur, L=3, K=2, world_size=24.0)
        assert ctx.spatial == []

    def test_temporal_spatial_disjoint_and_brute_force_topk(self):
        rng = Rng(8)
        for trial in range(50):
            n = int(rng.child("n", trial).integers(1, 33))
            bank = self._bank(n, seed=100 + trial)
            cur = random_pose(rng.child("cur", trial))
            L, K = 3, 2
            ctx = mem.reconstitute(bank, cur, L=L, K=K, world_size=24.0)
            temporal_ids = {c.capture_index for c in ctx.temporal}
            spatial_ids = {c.capture_index for c in ctx.spatial}
            assert temporal_ids.isdisjoint(spatial_ids)
            assert temporal_ids == set(range(max(0, n - L), n))
            # independent brute force with identical tie policy
            cands = bank.chunks()[: max(0, n - L)]
            scored = sorted(((mem.relevance(c, cur, 24.0), c.capture_index) for c in cands),
                            key=lambda sc: (-sc[0], -sc[1]))
            expect = [ci for s, ci in scored if s > mem.SPATIAL_SCORE_THRESHOLD][:K]
            assert [c.capture_index for c in ctx.spatial] == expect

    def test_empty_bank(self):
        ctx = mem.reconstitute(mem.MemoryBank(), random_pose(Rng(9)), L=3, K=1, world_size=24.0)
        assert len(ctx) == 0

    def test_bank_rejects_nonmonotone(self):
        bank = self._bank(3)
        with pytest.raises(ValueError):
            bank.append(make_chunk(Rng(10), 1))


class TestReframe:
    def test_single_temporal_chunk(self):
        ctx = mem.ContextSet(temporal=[make_chunk(Rng(11), 42)])
        assert list(mem.reframe(ctx)) == [0, 1]

    def test_pattern_small_consecutive_indices(self):
        # retrieved chunks sit directly adjacent to the current chunk in
        # positional space, whatever their true age
        rng = Rng(12)
        ctx = mem.ContextSet(temporal=[make_chunk(rng, 997), make_chunk(rng, 998), make_chunk(rng, 999)],
                             spatial=[make_chunk(rng, 3)])
        positions = mem.reframe(ctx)
        assert list(positions) == [0, 1, 2, 3, 4]
        ordered = ctx.ordered()
        assert [c.capture_index for c in ordered] == [3, 997, 998, 999]

    def test_age_invariance(self):
        rng = Rng(13)
        recs = [make_chunk(rng.child(i), i) for i in range(4)]
        ctx_young = mem.ContextSet(temporal=recs[1:], spatial=recs[:1])
        aged = [mem.ChunkRecord(latent=r.latent, poses=r.poses, keys=r.keys,
                                capture_index=r.capture_index + 990) for r in recs]
        ctx_old = mem.ContextSet(temporal=aged[1:], spatial=aged[:1])
        assert np.array_equal(mem.reframe(ctx_young), mem.reframe(ctx_old))

    def test_bounded_distance(self):
        L, K = 3, 1
        rng = Rng(14)
        ctx = mem.ContextSet(temporal=[make_chunk(rng, 500 + i) for i in range(L)],
                             spatial=[make_chunk(rng, 7)])
        pos = mem.reframe(ctx)
        fine = mem.fine_positions(pos)
        chunk_start_span = pos[-1] * 4 - pos[0] * 4
        assert chunk_start_span <= (L + K) * 4
        assert fine.max() - fine.min() <= (L + K + 1) * 4 - 1


class TestTrace:
    def test_jsonl_dump(self, tmp_path):
        import json
        ctx = mem.ContextSet(temporal=[make_chunk(Rng(15), 5)])
        trace = mem.MemoryTrace(tmp_path / "trace.jsonl")
        trace.write(6, ctx, {5: 0.5}, mem.reframe(ctx))
        trace.close()
        rec = json.loads((tmp_path / "trace.jsonl").read_text().strip())
        assert rec["chunk"] == 6 and rec["temporal"] == [5] and rec["positions"] == [0, 1]
