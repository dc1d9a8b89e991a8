"""Shared tiny-benchmark pipeline for the acceptance suite.

One pinned configuration: 16x16 frames in 10-cell worlds, a 48-dim
3-block transformer. Directional criteria all train at these budgets so the
comparisons are matched.
"""

from dataclasses import replace

import numpy as np

from streamworld import worldsim as ws
from streamworld.model import ModelConfig, init_params
from streamworld.rng import Rng
from streamworld.training import TrainConfig, train_stage

WORLD_SIZE = 9
FRAME_SIZE = 16
N_EPISODES = 200
EPISODE_LEN = 64
DATA_SEED = 1234

BUDGETS = {"1a": 700, "1b": 500, "2": 1800, "3-teacher": 1200, "distill": 240}
TRAIN_LR = 2e-3
TRAIN_BATCH = 4
EVAL_LEN = 240   # frames per revisit trajectory (60 chunks, far past training)
EVAL_TRAJ = 10   # per world x 2 worlds: 20 trajectories per protocol run


def tiny_config(**kw) -> ModelConfig:
    base = dict(dim=64, heads=2, blocks=3, patch=4, frame_size=FRAME_SIZE)
    base.update(kw)
    return ModelConfig(**base)


def world_seed(i: int) -> int:
    return Rng(DATA_SEED).child("wseed", i).seed


def build_episodes(n: int = N_EPISODES, length: int = EPISODE_LEN, n_worlds: int = 2,
                   seed: int = DATA_SEED) -> list[ws.Episode]:
    rng = Rng(seed)
    intr = ws.default_intrinsics(FRAME_SIZE)
    worlds = [ws.generate_world(world_seed(i), size=WORLD_SIZE) for i in range(n_worlds)]
    kinds = ["random_walk", "out_and_back", "out_and_back", "out_and_back"]
    eps = []
    for i in range(n):
        erng = rng.child("episode", i)
        world = worlds[int(erng.integers(0, n_worlds))]
        kind = kinds[int(erng.integers(0, len(kinds)))]
        eps.append(ws.make_trajectory(world, kind, length, seed=erng.seed, intrinsics=intr))
    return eps


def train_variant(episodes, action_mode: str, stages: list[str], seed: int = 7,
                  reframe_mode: str = "reframed", budgets: dict | None = None,
                  L: int = 3, K: int = 1, init_from: dict | None = None,
                  cfg_base: ModelConfig | None = None):
    """Train a model through the given stages; returns (params, cfg, losses)."""
    budgets = {**BUDGETS, **(budgets or {})}
    cfg = cfg_base or tiny_config(action_mode=action_mode, reframe_mode=reframe_mode,
                                  temporal_ctx=L, spatial_ctx=K)
    if init_from is not None:
        from streamworld import tensor as T
        params = {n: T.Tensor(p.data.copy(), requires_grad=True) for n, p in init_from.items()}
    else:
        params = init_params(cfg, seed=seed)
    losses = {}
    for stage in stages:
        tcfg = TrainConfig(steps=budgets[stage], batch=TRAIN_BATCH, lr=TRAIN_LR, seed=seed)
        losses[stage] = train_stage(params, cfg, stage, episodes, tcfg, WORLD_SIZE)
    return params, cfg, losses
