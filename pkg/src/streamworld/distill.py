"""Context forcing: distill the causal student to 4 denoise steps.

The student self-rolls 4 chunks conditioned on its reconstituted memory
(history always drawn from real episodes, never self-generated). The
bidirectional teachers then score the noised rollout conditioned on the
aligned context set: the union of the student's per-chunk contexts minus the
rolled-out chunks themselves. Exact set alignment is the property that keeps
distribution matching from collapsing; it is asserted, not assumed.

The student gradient is the normalized difference of the teachers'
clean-sample estimates (z0_hat = z_k + k v_hat), injected at the rollout
output and backpropagated through the whole rollout, including the memory
conditioning of later chunks on earlier rolled chunks. The fake-score model
then takes one flow-matching step on the student's own (detached) samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .memory import ChunkRecord, ContextSet, reconstitute
from .model import ModelConfig, WindowBatch, forward
from .optim import OptimState, opt_step
from .rng import Rng
from .sampler import student_schedule, truncated_schedule
from .training import EpisodeData, _PrefixBank
from .worldsim import Episode


@dataclass
class DistillConfig:
    steps: int = 2000
    lr_student: float = 1e-4
    lr_fake: float = 2e-5      # 5:1 student-to-fake ratio
    seed: int = 0
    shared_noise_k: bool = True  # one k per window (per-chunk variant behind the flag)
    windows_per_step: int = 2    # rollouts accumulated per gradient application
    m_stages: tuple = ((0.0, 4), (0.4, 8), (0.7, 16))
    log_path: str | None = None


def progressive_schedule(step: int, total_steps: int,
                         m_stages=((0.0, 4), (0.4, 8), (0.7, 16))) -> int:
    """Maximum history length m, increased stepwise over training."""
    frac = step / max(total_steps, 1)
    m = m_stages[0][1]
    for start, val in m_stages:
        if frac >= start:
            m = val
    return m


@dataclass
class RolloutWindow:
    """Four student-rolled chunks plus everything needed to score them."""

    j: int
    epd: EpisodeData
    rolled: list[ChunkRecord]          # latents are Tensors on the open tape
    ctx_sets: list[ContextSet]
    steps_used: list[int]

    @property
    def keys(self) -> np.ndarray:
        return np.array([r.keys for r in self.rolled], np.int64)

    @property
    def poses_rt(self) -> np.ndarray:
        return self.epd.poses_rt[self.j: self.j + 4]


def _positions_for(cfg: ModelConfig, ctx: ContextSet, current_capture: int) -> np.ndarray:
    if cfg.reframe_mode == "absolute":
        return np.asarray(list(ctx.capture_indices()) + [current_capture], np.int64)
    return np.arange(len(ctx) + 1, dtype=np.int64)


def _ctx_batch_fields(cfg: ModelConfig, records: list[ChunkRecord], epd: EpisodeData,
                      n_window: int, all_visible: bool = True) -> dict:
    cn = len(records)
    if cn == 0:
        return {}
    parts = []
    for rec in records:
        lat = T._wrap(rec.latent) if isinstance(rec.latent, T.Tensor) else T.Tensor(np.asarray(rec.latent, np.float32))
        parts.append(T.reshape(lat, (1, 1) + lat.shape))
    ctx = T.concat(parts, axis=1)
    return dict(
        ctx=ctx,
        ctx_keys=np.array([[r.keys for r in records]], np.int64),
        ctx_poses=np.stack([[np.stack([p.rt_matrix() for p in r.poses]) for r in records]]),
        ctx_valid=np.ones((1, cn), bool),
        ctx_vis=np.ones((1, n_window, cn), bool),
    )


def self_rollout(student: dict, cfg: ModelConfig, epd: EpisodeData, j: int, rng: Rng,
                 world_size: float) -> RolloutWindow:
    """Roll 4 chunks causally with the student, each with its own retrieved
    context and a random denoise step count in 1..student_steps.

    Must run inside an open Tape. Gradients reach the student through each
    chunk's final denoise step; earlier steps and the cross-chunk memory
    conditioning are detached (the truncated-backprop recipe of the few-step
    distillation literature; the fully unrolled gradient is unstable)."""
    bank_records = list(epd.records[:j])  # real history only
    base = student_schedule()
    rolled: list[ChunkRecord] = []
    ctx_sets: list[ContextSet] = []
    steps_used: list[int] = []
    for i in range(j, j + 4):
        bank = _PrefixBank(bank_records, len(bank_records))
        ctx = reconstitute(bank, epd.records[i].center_pose, cfg.temporal_ctx,
                           cfg.spatial_ctx, world_size)
        positions = _positions_for(cfg, ctx, i)
        s = int(rng.child("s", i).integers(1, len(base) + 1))
        schedule = truncated_schedule(base, s)
        x = T.Tensor(rng.child("init", i).randn(
            1, 1, cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels, dtype=np.float32))
        ctx_kwargs = _ctx_batch_fields(cfg, ctx.ordered(), epd, n_window=1)

        def chunk_batch(x_in, k_s):
            return WindowBatch(
                x=x_in, k=np.array([[k_s]], np.float32),
                keys=np.array([[epd.keys[i]]], np.int64),
                poses=epd.poses_rt[i][None, None], intrinsics=epd.intrinsics,
                chunk_pos=positions[None], bidirectional=False, **ctx_kwargs)

        for si, k_s in enumerate(schedule):
            k_next = schedule[si + 1] if si + 1 < len(schedule) else 0.0
            step_scale = np.float32(k_s - k_next)
            if si + 1 < len(schedule):
                with T.Tape.paused():
                    v = forward(student, cfg, chunk_batch(x, k_s))
                x = T.Tensor(x.data + step_scale * v.data)
            else:
                v = forward(student, cfg, chunk_batch(x, k_s))
                x = T.add(x, T.mul(v, step_scale))
        lat = T.reshape(x, (cfg.chunk_frames, cfg.tokens_per_frame, cfg.channels))
        rolled.append(ChunkRecord(latent=lat, poses=list(epd.records[i].poses),
                                  keys=int(epd.keys[i]), capture_index=i))
        # later chunks condition on the committed (detached) sample
        bank_records.append(ChunkRecord(latent=T.detach(lat), poses=list(epd.records[i].poses),
                                        keys=int(epd.keys[i]), capture_index=i))
        ctx_sets.append(ctx)
        steps_used.append(s)
    return RolloutWindow(j=j, epd=epd, rolled=rolled, ctx_sets=ctx_sets, steps_used=steps_used)


def align_context(window: RolloutWindow) -> list[ChunkRecord]:
    """C_tea: union of the per-chunk contexts minus the rolled-out chunks,
    deduplicated by capture_index, ordered by capture_index."""
    rolled_ids = {r.capture_index for r in window.rolled}
    by_id: dict[int, ChunkRecord] = {}
    for cs in window.ctx_sets:
        for rec in cs.ordered():
            if rec.capture_index not in rolled_ids:
                by_id[rec.capture_index] = rec
    out = [by_id[i] for i in sorted(by_id)]
    for rec in out:  # rolled chunks can never appear here; keep that loud
        assert not isinstance(rec.latent, T.Tensor), "aligned context must be real history"
    return out


@dataclass
class DistillState:
    student: dict
    fake: dict
    real: dict                      # frozen
    cfg: ModelConfig
    opt_student: OptimState
    opt_fake: OptimState
    step: int = 0
    log: list = field(default_factory=list)


def _teacher_batch(cfg: ModelConfig, window: RolloutWindow, c_tea: list[ChunkRecord],
                   x: np.ndarray, k_win: np.ndarray) -> WindowBatch:
    cn = len(c_tea)
    if cfg.reframe_mode == "absolute":
        pos = np.array([r.capture_index for r in c_tea] + list(range(window.j, window.j + 4)))
    else:
        pos = np.concatenate([np.arange(cn), cn + np.arange(4)])
    kwargs = _ctx_batch_fields(cfg, c_tea, window.epd, n_window=4)
    return WindowBatch(x=x[None], k=k_win[None].astype(np.float32), keys=window.keys[None],
                       poses=window.poses_rt[None], intrinsics=window.epd.intrinsics,
                       chunk_pos=pos[None], bidirectional=True, **kwargs)


def dmd_step(state: DistillState, episodes: list[EpisodeData], world_size: float,
             total_steps: int, dcfg: DistillConfig) -> dict:
    """One alternating update: student via the distribution-matching gradient
    backpropagated through its rollouts, then the fake-score model via flow
    matching on the student's own samples. Gradients accumulate over
    windows_per_step rollouts before the single application point."""
    cfg = state.cfg
    m = progressive_schedule(state.step, total_steps, dcfg.m_stages)
    acc_student: dict = {}
    windows = []
    grad_norm = 0.0
    js, s_used = [], []
    for w_i in range(dcfg.windows_per_step):
        rng = Rng(dcfg.seed).child("distill", state.step, w_i)
        epd = episodes[int(rng.integers(0, len(episodes)))]
        j = int(rng.integers(0, min(m, epd.n_chunks - 4) + 1))
        js.append(j)
        with T.Tape() as tape:
            window = self_rollout(state.student, cfg, epd, j, rng, world_size)
            c_tea = align_context(window)
            x_np = np.stack([r.latent.data for r in window.rolled])  # (4, F, P, C)

            with T.Tape.paused():
                if dcfg.shared_noise_k:
                    k_win = np.full(4, float(rng.child("k").uniform()), np.float32)
                else:
                    k_win = rng.child("k").uniform(size=4).astype(np.float32)
                kb = k_win[:, None, None, None]
                z1 = rng.child("noise").randn(*x_np.shape, dtype=np.float32)
                x_hat = ((1.0 - kb) * x_np + kb * z1).astype(np.float32)
                v_real = forward(state.real, cfg,
                                 _teacher_batch(cfg, window, c_tea, x_hat, k_win)).data[0]
                v_fake = forward(state.fake, cfg,
                                 _teacher_batch(cfg, window, c_tea, x_hat, k_win)).data[0]
                z0_real = x_hat + kb * v_real
                z0_fake = x_hat + kb * v_fake
                diff = z0_fake - z0_real
                # per-sample normalizer: the real teacher's correction scale,
                # so near-agreeing teachers give a near-zero gradient instead
                # of a unit-scale noise direction
                norm = float(np.abs(x_np - z0_real).mean()) + 1e-8
                grad = (diff / norm).astype(np.float32)

            # surrogate whose gradient at the rollout output is exactly `grad`
            surrogate = None
            for w, rec in enumerate(window.rolled):
                term = T.sum_(T.mul(rec.latent, grad[w]))
                surrogate = term if surrogate is None else T.add(surrogate, term)
            grads = tape.backward(surrogate)
        for n, p in state.student.items():
            if p in grads:
                acc_student[n] = acc_student.get(n, 0.0) + grads[p] / dcfg.windows_per_step
        grad_norm += float(np.linalg.norm(grad)) / dcfg.windows_per_step
        s_used.extend(window.steps_used)
        windows.append((window, c_tea, x_np))
    opt_step(state.student, acc_student, state.opt_student)

    # fake-score update: flow matching on the student's detached samples
    acc_fake: dict = {}
    beta_loss_val = 0.0
    for w_i, (window, c_tea, x_np) in enumerate(windows):
        rng = Rng(dcfg.seed).child("distill-beta", state.step, w_i)
        k2 = np.full(4, float(rng.child("k2").uniform()), np.float32)
        z1b = rng.child("noise2").randn(*x_np.shape, dtype=np.float32)
        x_in = ((1.0 - k2[:, None, None, None]) * x_np
                + k2[:, None, None, None] * z1b).astype(np.float32)
        target = x_np - z1b
        with T.Tape() as tape2:
            v_b = forward(state.fake, cfg, _teacher_batch(cfg, window, c_tea, x_in, k2))
            beta_loss = T.mean(T.mul(T.sub(v_b, target[None]), T.sub(v_b, target[None])))
            grads_b = tape2.backward(beta_loss)
        for n, p in state.fake.items():
            if p in grads_b:
                acc_fake[n] = acc_fake.get(n, 0.0) + grads_b[p] / dcfg.windows_per_step
        beta_loss_val += beta_loss.item() / dcfg.windows_per_step
    opt_step(state.fake, acc_fake, state.opt_fake)

    state.step += 1
    rec = {"step": state.step, "m": m, "j": js if len(js) > 1 else js[0], "s": s_used,
           "dmd_grad_norm": grad_norm, "beta_loss": beta_loss_val}
    state.log.append(rec)
    return rec


def run_distillation(student: dict, real_teacher: dict, cfg: ModelConfig,
                     episodes: list[Episode], dcfg: DistillConfig,
                     world_size: float) -> DistillState:
    """Full loop: beta initialized from the frozen real teacher; student and
    beta alternate. Returns the final state (student holds the distilled weights)."""
    data = [EpisodeData(ep, cfg) for ep in episodes]
    fake = {n: T.Tensor(p.data.copy(), requires_grad=True) for n, p in real_teacher.items()}
    state = DistillState(student=student, fake=fake, real=real_teacher, cfg=cfg,
                         opt_student=OptimState(lr=dcfg.lr_student),
                         opt_fake=OptimState(lr=dcfg.lr_fake))
    log_f = open(dcfg.log_path, "a") if dcfg.log_path else None
    for _ in range(dcfg.steps):
        rec = dmd_step(state, data, world_size, dcfg.steps, dcfg)
        if log_f:
            log_f.write(json.dumps(rec) + "\n")
    if log_f:
        log_f.close()
    return state
