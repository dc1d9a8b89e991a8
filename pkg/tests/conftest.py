"""Session-scoped training fixtures shared by the acceptance suite.

Everything trains once per session at the pinned tiny-benchmark budgets in
pipeline_support; the directional acceptance criteria then compare these
checkpoints at matched budget.
"""

import numpy as np
import pytest

from streamworld import tensor as T

import pipeline_support as ps


def _copy(params):
    return {n: T.Tensor(p.data.copy(), requires_grad=True) for n, p in params.items()}


@pytest.fixture(scope="session")
def episodes():
    return ps.build_episodes()


@pytest.fixture(scope="session")
def trunk_1a(episodes):
    """Bidirectional dual-action model (stage 1a) plus its loss history."""
    params, cfg, losses = ps.train_variant(episodes, "dual", ["1a"])
    return params, cfg, losses["1a"]


@pytest.fixture(scope="session")
def trunk_dual(trunk_1a, episodes):
    """Causal dual-action model (stage 1b continued from 1a)."""
    params_1a, cfg, _ = trunk_1a
    params, cfg, _ = ps.train_variant(episodes, "dual", ["1b"], init_from=params_1a)
    return params, cfg


@pytest.fixture(scope="session")
def stage1_discrete(episodes):
    params, cfg, _ = ps.train_variant(episodes, "discrete", ["1a", "1b"])
    return params, cfg


@pytest.fixture(scope="session")
def stage1_continuous(episodes):
    params, cfg, _ = ps.train_variant(episodes, "continuous", ["1a", "1b"])
    return params, cfg


@pytest.fixture(scope="session")
def mem_reframed(trunk_dual, episodes):
    """Stage-2 causal memory model, reframed positional indices."""
    trunk, _ = trunk_dual
    params, cfg, _ = ps.train_variant(episodes, "dual", ["2"], init_from=trunk)
    return params, cfg


@pytest.fixture(scope="session")
def mem_absolute(trunk_dual, episodes):
    trunk, _ = trunk_dual
    params, cfg, _ = ps.train_variant(episodes, "dual", ["2"], reframe_mode="absolute",
                                      init_from=trunk)
    return params, cfg


@pytest.fixture(scope="session")
def teacher_3(trunk_1a, episodes):
    """Memory-augmented bidirectional teacher, continued from stage 1a."""
    params_1a, _, _ = trunk_1a
    params, cfg, _ = ps.train_variant(episodes, "dual", ["3-teacher"], init_from=params_1a)
    return params, cfg


@pytest.fixture(scope="session")
def distilled(mem_reframed, teacher_3, episodes):
    """4-step student after context-forcing distillation."""
    from streamworld.distill import DistillConfig, run_distillation
    student, cfg = mem_reframed
    teacher, _ = teacher_3
    state = run_distillation(_copy(student), teacher, cfg, episodes,
                             DistillConfig(steps=ps.BUDGETS["distill"], seed=11),
                             ps.WORLD_SIZE)
    return state.student, cfg


@pytest.fixture(scope="session")
def degenerate_pipeline():
    """World reduced to 2x2 frames: train, distill, and sample moments.

    Returns (mean_teacher20, cov_teacher20, mean_distilled4, cov_distilled4)
    over 64 rollouts of the same conditioning with different noise seeds.
    """
    from streamworld import worldsim as ws
    from streamworld.data import normalize_frames
    from streamworld.distill import DistillConfig, run_distillation
    from streamworld.memory import ChunkRecord
    from streamworld.model import ModelConfig, frames_to_chunks, init_params
    from streamworld.sampler import rollout, student_schedule, teacher_schedule
    from streamworld.training import TrainConfig, train_stage

    cfg = ModelConfig(dim=24, heads=1, blocks=2, patch=2, frame_size=2)
    world_size = 8
    world = ws.generate_world(5, size=world_size)
    intr = ws.default_intrinsics(2)
    eps = [ws.make_trajectory(world, ["random_walk", "out_and_back"][i % 2], 32,
                              seed=i, intrinsics=intr) for i in range(64)]

    def tc(steps):
        return TrainConfig(steps=steps, batch=4, lr=2e-3, seed=3)

    student = init_params(cfg, seed=1)
    train_stage(student, cfg, "1a", eps, tc(500), world_size)
    train_stage(student, cfg, "1b", eps, tc(400), world_size)
    train_stage(student, cfg, "2", eps, tc(500), world_size)
    teacher = init_params(cfg, seed=2)
    train_stage(teacher, cfg, "1a", eps, tc(500), world_size)
    train_stage(teacher, cfg, "3-teacher", eps, tc(500), world_size)
    pre = _copy(student)
    state = run_distillation(student, teacher, cfg, eps,
                             DistillConfig(steps=200, seed=4), world_size)

    ep = eps[1]
    chunks = frames_to_chunks(normalize_frames(ep.frames), cfg.patch)
    first = ChunkRecord(latent=chunks[0], poses=list(ep.poses[:4]), keys=0,
                        capture_index=0)
    acts = [(int(ws.chunk_keys(ep.actions[c * 4:(c + 1) * 4])),
             ep.poses[c * 4:(c + 1) * 4]) for c in range(1, 4)]

    def moments(params, schedule, n=64):
        xs = []
        for s in range(n):
            recs, _ = rollout(params, cfg, first, world_size, acts,
                              noise_seed=1000 + s, schedule=schedule)
            xs.append(np.asarray(recs[-1].latent).reshape(-1))
        X = np.stack(xs)
        return X.mean(0), np.cov(X.T)

    mu_t, cov_t = moments(pre, teacher_schedule())
    mu_d, cov_d = moments(state.student, student_schedule())
    return mu_t, cov_t, mu_d, cov_d
