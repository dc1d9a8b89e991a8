"""Command-line entry point.

Subcommands: gen-data, train (stages 1a | 1b | 2 | 3-teacher), distill,
eval, ablate, serve. Configuration comes from an optional key=value file
with --set overrides; every run writes a provenance manifest into its
output directory. Exit codes: 0 ok, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, params_fingerprint, save_checkpoint
from .config import apply_overrides, parse_config_file, write_run_manifest
from .data import generate_dataset, load_dataset
from .distill import DistillConfig, run_distillation
from .evaluate import (ablate, ablation_table, model_generator, pose_error,
                       revisit_protocol)
from .model import ModelConfig, init_params
from .sampler import student_schedule, teacher_schedule
from .training import STAGES, TrainConfig, train_stage

DEFAULTS = {
    "dim": 128, "heads": 4, "blocks": 6, "patch": 8, "frame_size": 64,
    "world_size": 24, "episodes": 500, "episode_length": 64,
    "batch": 4, "lr": 1e-4, "seed": 0,
    "steps_1a": 2000, "steps_1b": 2000, "steps_2": 3000,
    "steps_3_teacher": 3000, "steps_distill": 2000,
    "action_mode": "dual", "reframe_mode": "reframed", "L": 3, "K": 1,
    "eval_worlds": 3, "eval_length": 96, "eval_trajectories": 7,
}

MODEL_KEYS = ("dim", "heads", "blocks", "patch", "frame_size", "action_mode", "reframe_mode")


def _load_config(args) -> dict:
    config = dict(DEFAULTS)
    if getattr(args, "config", None):
        config.update(parse_config_file(args.config))
    apply_overrides(config, getattr(args, "set", None) or [])
    return config


def _model_config(config: dict) -> ModelConfig:
    return ModelConfig(
        dim=config["dim"], heads=config["heads"], blocks=config["blocks"],
        patch=config["patch"], frame_size=config["frame_size"],
        action_mode=config["action_mode"], reframe_mode=config["reframe_mode"],
        temporal_ctx=config["L"], spatial_ctx=config["K"])


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    write_run_manifest(args.out, config, config["seed"])
    manifest = generate_dataset(
        args.out, n_episodes=args.episodes or config["episodes"],
        length=config["episode_length"], seed=config["seed"],
        world_size=config["world_size"], frame_size=config["frame_size"])
    print(f"wrote {len(manifest['episodes'])} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    cfg = _model_config(config)
    out = Path(args.out)
    write_run_manifest(out, config, config["seed"])
    episodes = load_dataset(args.data)
    if args.init:
        params, loaded = load_checkpoint(args.init)
        cfg = ModelConfig.from_dict({**loaded, "reframe_mode": config["reframe_mode"],
                                     "temporal_ctx": config["L"], "spatial_ctx": config["K"]})
    else:
        params = init_params(cfg, seed=config["seed"])
    steps = args.steps if args.steps is not None else config[
        "steps_" + args.stage.replace("-", "_")]
    tcfg = TrainConfig(steps=steps, batch=config["batch"], lr=config["lr"],
                       seed=config["seed"], log_path=str(out / "train_log.jsonl"))
    losses = train_stage(params, cfg, args.stage, episodes, tcfg, config["world_size"])
    save_checkpoint(out / "ckpt", params, cfg.to_dict())
    print(f"stage {args.stage}: {len(losses)} steps, "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}, ckpt {params_fingerprint(params)}")
    return 0


def cmd_distill(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    write_run_manifest(out, config, config["seed"])
    episodes = load_dataset(args.data)
    student, s_cfg = load_checkpoint(args.student)
    teacher, _ = load_checkpoint(args.teacher)
    cfg = ModelConfig.from_dict(s_cfg)
    steps = args.steps if args.steps is not None else config["steps_distill"]
    dcfg = DistillConfig(steps=steps, seed=config["seed"],
                         log_path=str(out / "distill_log.jsonl"))
    state = run_distillation(student, teacher, cfg, episodes, dcfg, config["world_size"])
    save_checkpoint(out / "ckpt", state.student, cfg.to_dict())
    print(f"distilled {steps} steps, ckpt {params_fingerprint(state.student)}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    write_run_manifest(out, config, config["seed"])
    params, loaded = load_checkpoint(args.ckpt)
    cfg = ModelConfig.from_dict(loaded)
    schedule = student_schedule() if args.schedule == "student" else teacher_schedule()
    gen = model_generator(params, cfg, schedule=schedule)
    seeds = [config["seed"] + i for i in range(config["eval_worlds"])]
    fp = params_fingerprint(params)
    rev = revisit_protocol(gen, seeds, length=config["eval_length"],
                           world_size=config["world_size"], frame_size=cfg.frame_size,
                           noise_seed=config["seed"],
                           trajectories_per_world=config["eval_trajectories"],
                           checkpoint_hash=fp, config=loaded)
    pe = pose_error(gen, seeds, length=config["eval_length"],
                    world_size=config["world_size"], frame_size=cfg.frame_size,
                    noise_seed=config["seed"], checkpoint_hash=fp, config=loaded)
    (out / "revisit.json").write_text(rev.to_json())
    (out / "pose_error.json").write_text(pe.to_json())
    print(rev.text_table())
    print()
    print(pe.text_table())
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    write_run_manifest(out, config, config["seed"])
    episodes = load_dataset(args.data)
    world_size = config["world_size"]
    steps = args.steps if args.steps is not None else 300

    def train_cell(cell):
        cfg = ModelConfig(
            dim=config["dim"], heads=config["heads"], blocks=config["blocks"],
            patch=config["patch"], frame_size=config["frame_size"],
            action_mode=cell["action"], reframe_mode=cell["rope"],
            temporal_ctx=cell["L"], spatial_ctx=cell["K"])
        params = init_params(cfg, seed=config["seed"])
        tcfg = TrainConfig(steps=steps, batch=config["batch"], lr=config["lr"],
                           seed=config["seed"])
        train_stage(params, cfg, "1a", episodes, tcfg, world_size)
        train_stage(params, cfg, "1b", episodes, tcfg, world_size)
        train_stage(params, cfg, "2", episodes, tcfg, world_size)
        return params, cfg

    def evaluate_cell(cell, artifacts):
        params, cfg = artifacts
        gen = model_generator(params, cfg, schedule=teacher_schedule())
        seeds = [config["seed"]]
        rep = revisit_protocol(gen, seeds, length=config["eval_length"],
                               world_size=world_size, frame_size=cfg.frame_size,
                               trajectories_per_world=2,
                               checkpoint_hash=params_fingerprint(params),
                               config={})
        pe = pose_error(gen, seeds, length=max(32, config["eval_length"] // 2),
                        world_size=world_size, frame_size=cfg.frame_size,
                        episodes_per_world=1, checkpoint_hash=rep.checkpoint_hash, config={})
        rep.metrics.update({"r_err_deg": pe.metrics["r_err_deg"],
                            "t_err_cells": pe.metrics["t_err_cells"]})
        return rep

    grid = None
    if args.quick:
        grid = {"action": ("discrete", "dual"), "rope": ("reframed",), "memory": ((3, 1),)}
    reports = ablate(train_cell, evaluate_cell, grid)
    table = ablation_table(reports)
    (out / "ablation.json").write_text(json.dumps([r.__dict__ for r in reports], indent=1))
    (out / "ablation.txt").write_text(table)
    print(table)
    return 0


def cmd_serve(args) -> int:
    from .server import serve

    repo_root = Path(__file__).resolve().parents[2]
    frontend = args.frontend or str(repo_root / "frontend")
    serve(args.addr, args.ckpt, args.tick_ms,
          frontend_dir=frontend if Path(frontend).exists() else None,
          world_size=args.world_size)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamworld",
                                description="desk-scale interactive world model")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a procedural episode dataset")
    g.add_argument("--episodes", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint to continue from")
    t.add_argument("--steps", type=int)
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("distill", help="context-forcing distillation")
    d.add_argument("--data", required=True)
    d.add_argument("--student", required=True)
    d.add_argument("--teacher", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--steps", type=int)
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("eval", help="revisit + pose-following protocols")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--schedule", choices=("student", "teacher"), default="teacher")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate the ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--quick", action="store_true", help="reduced grid smoke run")
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("serve", help="streaming session server")
    s.add_argument("--addr", default="127.0.0.1:8787")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tick-ms", type=int, default=80)
    s.add_argument("--world-size", type=int, default=24)
    s.add_argument("--frontend")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except Exception as e:  # runtime failure -> exit 1 with a one-line reason
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
