"""Streaming session service.

One WebSocket endpoint (/session) per client: JSON control messages in,
binary frames out. Each session runs its own generation thread; sessions
share only the immutable model parameters. The first chunk streamed is the
oracle render at the spawn pose (the conditioning image); the model takes
over from chunk 1.

Tick discipline: the generation loop consumes at most one action message per
tick. With tick_ms > 0 an empty inbox yields an idle action after the tick
deadline (generation never stalls); tick_ms == 0 selects lockstep mode,
which blocks for the next action and makes scripted sessions byte-exact
replayable (the committed pose trace equals an offline fold of step_pose
over the action sequence).

Frame wire format: "WPLY" | version u8=1 | frame_index u64 LE | width u16 LE
| height u16 LE | format u8=0 (RGB8) | payload.
"""

from __future__ import annotations

import json
import queue
import struct
import threading
from pathlib import Path

import anyio
import numpy as np
from starlette.applications import Starlette
from starlette.responses import FileResponse, HTMLResponse, PlainTextResponse
from starlette.routing import Route, WebSocketRoute
from starlette.websockets import WebSocket, WebSocketDisconnect

from .checkpoint import load_checkpoint
from .data import normalize_frames
from .memory import ChunkRecord
from .model import ModelConfig, frames_to_chunks
from .sampler import RolloutSession, progressive_decode, student_schedule
from .worldsim import (CameraPose, chunk_keys, default_intrinsics, generate_world,
                       render, spawn_pose, step_pose)

FRAME_MAGIC = b"WPLY"
FRAME_VERSION = 1
FORMAT_RGB8 = 0
OUTBOX_CAPACITY = 16
TICKS_PER_CHUNK = 4


def encode_frame(index: int, frame: np.ndarray) -> bytes:
    h, w, _ = frame.shape
    header = struct.pack("<4sBQHHB", FRAME_MAGIC, FRAME_VERSION, index, w, h, FORMAT_RGB8)
    return header + np.ascontiguousarray(frame).tobytes()


def decode_frame(blob: bytes):
    magic, version, index, w, h, fmt = struct.unpack("<4sBQHHB", blob[:18])
    if magic != FRAME_MAGIC or version != FRAME_VERSION or fmt != FORMAT_RGB8:
        raise ValueError("bad frame header")
    payload = np.frombuffer(blob[18:], dtype=np.uint8)
    if payload.size != w * h * 3:
        raise ValueError("bad frame payload length")
    return index, payload.reshape(h, w, 3)


class Session:
    """State owned by one generation loop."""

    _next_id = 1
    _id_lock = threading.Lock()

    def __init__(self, seed: int, params: dict, cfg: ModelConfig, tick_ms: int,
                 world_size: int = 24):
        with Session._id_lock:
            self.id = Session._next_id
            Session._next_id += 1
        self.seed = seed
        self.params = params
        self.cfg = cfg
        self.tick_ms = tick_ms
        self.world = generate_world(seed, size=world_size)
        self.intrinsics = default_intrinsics(cfg.frame_size)
        self.pose = spawn_pose(self.world, self.intrinsics)
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()
        self.lagged = threading.Event()
        self.stop = threading.Event()
        self.frame_index = 0
        self.tick = 0
        self.thread: threading.Thread | None = None

    # -- outbox with drop-oldest backpressure --------------------------------

    def _emit(self, kind: str, payload) -> None:
        while True:
            try:
                self.outbox.put_nowait((kind, payload))
                return
            except queue.Full:  # pragma: no cover - depends on consumer speed
                try:
                    self.outbox.get_nowait()
                    self.lagged.set()
                except queue.Empty:
                    pass

    def emit_frame(self, frame: np.ndarray) -> None:
        if self.outbox.qsize() >= OUTBOX_CAPACITY:
            # drop the oldest frame, keep the stream fresh, tell the client
            try:
                self.outbox.get_nowait()
            except queue.Empty:
                pass
            self._emit("msg", {"type": "lag"})
        self._emit("frame", encode_frame(self.frame_index, frame))
        self.frame_index += 1

    def emit_msg(self, msg: dict) -> None:
        self._emit("msg", msg)

    # -- generation loop ------------------------------------------------------

    def _first_chunk(self) -> ChunkRecord:
        frame = render(self.world, self.pose)
        frames = np.stack([frame] * 4)
        latent = frames_to_chunks(normalize_frames(frames), self.cfg.patch)[0]
        return ChunkRecord(latent=latent, poses=[self.pose] * 4, keys=0, capture_index=0)

    def _next_keys(self) -> int:
        """One action message per tick; idle when the inbox is empty (timed
        mode) or block for the client (lockstep mode, tick_ms == 0)."""
        try:
            if self.tick_ms == 0:
                msg = self.inbox.get(timeout=5.0)
            else:
                msg = self.inbox.get(timeout=self.tick_ms / 1000.0)
        except queue.Empty:
            return 0
        return int(msg.get("keys", 0)) & 0x3F

    def run(self) -> None:
        first = self._first_chunk()
        for frame in progressive_decode(np.asarray(first.latent), self.cfg):
            self.emit_frame(frame)
        rollout = RolloutSession(self.params, self.cfg, first, self.world.size,
                                 noise_seed=self.seed, schedule=student_schedule())
        import time as _time
        while not self.stop.is_set():
            keys_window, poses_window = [], []
            for _ in range(TICKS_PER_CHUNK):
                if self.stop.is_set():
                    return
                keys = self._next_keys()
                self.pose = step_pose(self.pose, keys, self.world)
                keys_window.append(keys)
                poses_window.append(self.pose)
                self.tick += 1
            t0 = _time.perf_counter()
            rec = rollout.step(chunk_keys(np.array(keys_window)), poses_window)
            chunk_ms = (_time.perf_counter() - t0) * 1e3
            for frame in rollout.frames(rec):
                if self.stop.is_set():
                    return
                self.emit_frame(frame)
            self.emit_msg({
                "type": "stats",
                "session": self.id,
                "tick": self.tick,
                "chunk": rec.capture_index,
                "chunk_ms": round(chunk_ms, 3),
                "fps": round(1000.0 * TICKS_PER_CHUNK / max(chunk_ms, 1e-9), 2)
                if self.tick_ms == 0 else round(1000.0 / max(self.tick_ms, 1), 2),
                "memory": rollout.last_retrieved,
                "pose": [self.pose.translation[0], self.pose.translation[1], self.pose.yaw],
            })

    def start(self) -> None:
        self.thread = threading.Thread(target=self.run, daemon=True)
        self.thread.start()

    def shutdown(self) -> None:
        self.stop.set()
        if self.thread is not None:
            self.thread.join(timeout=5.0)


def build_app(params: dict, cfg: ModelConfig, tick_ms: int = 80, world_size: int = 24,
              frontend_dir: str | None = None) -> Starlette:
    sessions: dict[int, Session] = {}

    async def session_ws(ws: WebSocket):
        await ws.accept()
        session: Session | None = None
        try:
            raw = await ws.receive_text()
            try:
                msg = json.loads(raw)
                assert msg.get("type") == "init"
                seed = int(msg["seed"])
            except Exception:
                await ws.send_text(json.dumps({"type": "error", "code": "bad_init"}))
                await ws.close()
                return
            session = Session(seed, params, cfg, tick_ms, world_size)
            sessions[session.id] = session
            await ws.send_text(json.dumps({
                "type": "ready", "session": session.id,
                "w": cfg.frame_size, "h": cfg.frame_size,
            }))
            session.start()

            async def receiver():
                while True:
                    try:
                        text = await ws.receive_text()
                    except WebSocketDisconnect:
                        session.stop.set()
                        return
                    try:
                        m = json.loads(text)
                    except json.JSONDecodeError:
                        continue
                    if m.get("type") == "action":
                        session.inbox.put(m)
                    elif m.get("type") == "close":
                        session.stop.set()
                        return

            async def sender():
                while not (session.stop.is_set() and session.outbox.empty()):
                    try:
                        kind, payload = session.outbox.get_nowait()
                    except queue.Empty:
                        await anyio.sleep(0.002)
                        continue
                    if kind == "frame":
                        await ws.send_bytes(payload)
                    else:
                        await ws.send_text(json.dumps(payload))

            async with anyio.create_task_group() as tg:
                tg.start_soon(receiver)
                tg.start_soon(sender)
        except WebSocketDisconnect:
            pass
        finally:
            if session is not None:
                session.shutdown()
                sessions.pop(session.id, None)

    async def index(request):
        if frontend_dir:
            page = Path(frontend_dir) / "index.html"
            if page.exists():
                return FileResponse(page)
        return HTMLResponse(
            "<html><body><h3>streamworld</h3>"
            "<p>No browser client built; connect to /session over WebSocket.</p>"
            "</body></html>")

    async def static_file(request):
        if not frontend_dir:
            return PlainTextResponse("not found", status_code=404)
        name = request.path_params["name"]
        target = (Path(frontend_dir) / "dist" / name).resolve()
        if not str(target).startswith(str(Path(frontend_dir).resolve())) or not target.exists():
            return PlainTextResponse("not found", status_code=404)
        return FileResponse(target)

    return Starlette(routes=[
        Route("/", index),
        Route("/dist/{name:path}", static_file),
        WebSocketRoute("/session", session_ws),
    ])


def serve(addr: str, ckpt_dir: str, tick_ms: int, frontend_dir: str | None = None,
          world_size: int = 24) -> None:
    import uvicorn

    params, config = load_checkpoint(ckpt_dir)
    cfg = ModelConfig.from_dict(config)
    app = build_app(params, cfg, tick_ms=tick_ms, world_size=world_size,
                    frontend_dir=frontend_dir)
    host, port = addr.rsplit(":", 1)
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
