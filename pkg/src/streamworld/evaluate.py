"""Evaluation protocols.

Revisit consistency follows the long-horizon recipe: generate along an
out-and-back trajectory, then score each return-half frame against the
model's OWN first-pass frame at the mirrored pose (not against the
simulator), so the number measures memory, not renderer fidelity.

Pose-following error is a simulator-enabled proxy: the oracle renders
candidate frames on the discrete pose lattice around each commanded pose and
picks the best PSNR match against the generated frame; we report the mean
rotation gap (degrees) and translation gap (cells) of that estimate. The
reports label it as a proxy.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import params_fingerprint
from .data import normalize_frames
from .memory import ChunkRecord
from .metrics import PSNR_CAP, psnr, ssim
from .model import ModelConfig, frames_to_chunks
from .sampler import rollout, student_schedule, teacher_schedule
from .worldsim import (CameraPose, Episode, GridWorld, MOVE_STEP, TURN_STEP_DEG,
                       chunk_keys, default_intrinsics, generate_world, make_trajectory,
                       render, wrap_angle)


@dataclass
class EvalReport:
    protocol: str
    metrics: dict
    seeds: list
    checkpoint_hash: str
    config: dict
    notes: str = ""
    latency_ms: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    def text_table(self) -> str:
        rows = [f"{'metric':<28}{'value':>12}"]
        rows.append("-" * 40)
        for k, v in sorted(self.metrics.items()):
            rows.append(f"{k:<28}{v:>12.4f}")
        for k, v in sorted(self.latency_ms.items()):
            rows.append(f"{'latency_' + k + '_ms':<28}{v:>12.2f}")
        return "\n".join(rows)


def episode_action_stream(ep: Episode) -> list[tuple[int, list[CameraPose]]]:
    """Per-chunk (keys, poses) for chunks 1..n-1; chunk 0 is the condition."""
    out = []
    for c in range(1, ep.n_chunks):
        keys = int(chunk_keys(ep.actions[c * 4:(c + 1) * 4]))
        out.append((keys, ep.poses[c * 4:(c + 1) * 4]))
    return out


def model_generator(params: dict, cfg: ModelConfig, schedule=None, use_cache=True):
    """Wrap a checkpoint as an episode -> frames function."""

    def generate(ep: Episode, world: GridWorld, noise_seed: int) -> tuple[np.ndarray, list]:
        chunks = frames_to_chunks(normalize_frames(ep.frames), cfg.patch)
        first = ChunkRecord(latent=chunks[0], poses=list(ep.poses[:4]), keys=0, capture_index=0)
        recs, frames = rollout(params, cfg, first, world.size, episode_action_stream(ep),
                               noise_seed=noise_seed, schedule=schedule, use_cache=use_cache)
        return frames, recs

    return generate


def oracle_generator():
    """The simulator itself standing in for a model: revisit-exact upper bound."""

    def generate(ep: Episode, world: GridWorld, noise_seed: int):
        return ep.frames.copy(), []

    return generate


def revisit_protocol(generate, world_seeds: list[int], length: int, world_size: int,
                     frame_size: int, noise_seed: int = 0, trajectories_per_world: int = 4,
                     checkpoint_hash: str = "", config: dict | None = None) -> EvalReport:
    """Mean PSNR/SSIM between each return-half frame and the generated frame
    of the mirrored first-pass index, over out-and-back trajectories."""
    intr = default_intrinsics(frame_size)
    psnrs, ssims = [], []
    chunk_ms = []
    for ws_seed in world_seeds:
        world = generate_world(ws_seed, size=world_size)
        for t in range(trajectories_per_world):
            ep = make_trajectory(world, "out_and_back", length, seed=noise_seed * 1000 + t,
                                 intrinsics=intr)
            t0 = time.perf_counter()
            frames, _ = generate(ep, world, noise_seed + 7 * t)
            chunk_ms.append((time.perf_counter() - t0) / max(ep.n_chunks - 1, 1) * 1e3)
            L = len(ep)
            for i in range(L // 2, L):
                psnrs.append(psnr(frames[i], frames[L - 1 - i]))
                ssims.append(ssim(frames[i], frames[L - 1 - i]))
    return EvalReport(
        protocol="revisit",
        metrics={"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
                 "n_frames": float(len(psnrs))},
        seeds=list(world_seeds), checkpoint_hash=checkpoint_hash,
        config=config or {}, latency_ms={"per_chunk_mean": float(np.mean(chunk_ms))})


def _pose_lattice(pose: CameraPose, yaw_range=2, step_range=3):
    """Candidate poses on the discrete action lattice around a commanded pose."""
    cands = []
    for dy in range(-yaw_range, yaw_range + 1):
        yaw = pose.yaw + np.radians(TURN_STEP_DEG) * dy
        for dx in range(-step_range, step_range + 1):
            for dz in range(-step_range, step_range + 1):
                x = pose.translation[0] + MOVE_STEP * dx
                y = pose.translation[1] + MOVE_STEP * dz
                cands.append(CameraPose.from_yaw(x, y, yaw, pose.intrinsics))
    return cands


def locate_pose(world: GridWorld, frame: np.ndarray, commanded: CameraPose) -> CameraPose:
    """Best oracle-rendered lattice pose for a generated frame (max PSNR)."""
    best, best_score = commanded, -1.0
    for cand in _pose_lattice(commanded):
        if not world.is_free_point(cand.translation[0], cand.translation[1]):
            continue
        score = psnr(render(world, cand), frame)
        if score > best_score:
            best, best_score = cand, score
    return best


def pose_error(generate, world_seeds: list[int], length: int, world_size: int,
               frame_size: int, noise_seed: int = 0, episodes_per_world: int = 2,
               frames_per_chunk_checked: int = 1, checkpoint_hash: str = "",
               config: dict | None = None) -> EvalReport:
    """Mean geodesic rotation error (degrees) and translation error (cells)
    between commanded poses and oracle-located poses of generated frames."""
    intr = default_intrinsics(frame_size)
    r_errs, t_errs = [], []
    for ws_seed in world_seeds:
        world = generate_world(ws_seed, size=world_size)
        for t in range(episodes_per_world):
            ep = make_trajectory(world, "random_walk", length, seed=900 + t, intrinsics=intr)
            frames, _ = generate(ep, world, noise_seed + 13 * t)
            for c in range(1, ep.n_chunks):
                for f in range(frames_per_chunk_checked):
                    idx = c * 4 + 3 - f
                    commanded = ep.poses[idx]
                    est = locate_pose(world, frames[idx], commanded)
                    r_errs.append(abs(np.degrees(wrap_angle(est.yaw - commanded.yaw))))
                    t_errs.append(float(np.linalg.norm(
                        est.translation[:2] - commanded.translation[:2])))
    return EvalReport(
        protocol="pose_error",
        metrics={"r_err_deg": float(np.mean(r_errs)), "t_err_cells": float(np.mean(t_errs)),
                 "n_frames": float(len(r_errs))},
        seeds=list(world_seeds), checkpoint_hash=checkpoint_hash, config=config or {},
        notes="proxy metric: oracle-render lattice search, not a learned pose estimator")


ABLATION_GRID = {
    "action": ("discrete", "continuous", "dual"),
    "rope": ("absolute", "reframed"),
    "memory": ((3, 1), (1, 3)),
}


def ablate(train_cell, evaluate_cell, grid: dict | None = None) -> list[EvalReport]:
    """Run every cell of the ablation grid with caller-supplied train and
    evaluate functions; returns one report per cell plus ordering notes."""
    grid = grid or ABLATION_GRID
    reports = []
    for action in grid["action"]:
        for rope in grid["rope"]:
            for L, K in grid["memory"]:
                cell = {"action": action, "rope": rope, "L": L, "K": K}
                artifacts = train_cell(cell)
                report = evaluate_cell(cell, artifacts)
                report.config.update(cell)
                reports.append(report)
    return reports


def ablation_table(reports: list[EvalReport]) -> str:
    hdr = f"{'action':<12}{'rope':<11}{'L':>3}{'K':>3} | " + "".join(
        f"{k:>12}" for k in sorted(reports[0].metrics))
    lines = [hdr, "-" * len(hdr)]
    for r in reports:
        c = r.config
        lines.append(f"{c['action']:<12}{c['rope']:<11}{c['L']:>3}{c['K']:>3} | "
                     + "".join(f"{v:>12.4f}" for _, v in sorted(r.metrics.items())))
    return "\n".join(lines)
