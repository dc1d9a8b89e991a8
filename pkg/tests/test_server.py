"""Session protocol over an in-process WebSocket client."""

import json

import numpy as np
import pytest
from starlette.testclient import TestClient

from streamworld import worldsim as ws
from streamworld.model import ModelConfig, init_params
from streamworld.server import build_app, decode_frame, encode_frame


def tiny_cfg():
    return ModelConfig(dim=48, heads=2, blocks=2, patch=4, frame_size=16)


@pytest.fixture(scope="module")
def app():
    cfg = tiny_cfg()
    params = init_params(cfg, seed=1)
    return build_app(params, cfg, tick_ms=0, world_size=10)


def recv_until(sock, want_frames=None, want_stats=None, limit=10000):
    frames, msgs = [], []
    for _ in range(limit):
        if want_frames is not None and len(frames) >= want_frames and \
                (want_stats is None or len([m for m in msgs if m["type"] == "stats"]) >= want_stats):
            break
        got = sock.receive()
        if "bytes" in got and got["bytes"] is not None:
            frames.append(decode_frame(got["bytes"]))
        elif "text" in got and got["text"] is not None:
            msgs.append(json.loads(got["text"]))
    return frames, msgs


class TestFrameCodec:
    def test_roundtrip(self):
        frame = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3)
        idx, back = decode_frame(encode_frame(7, frame))
        assert idx == 7 and np.array_equal(back, frame)

    def test_bad_magic(self):
        blob = b"XXXX" + encode_frame(0, np.zeros((2, 2, 3), np.uint8))[4:]
        with pytest.raises(ValueError):
            decode_frame(blob)

    def test_payload_length(self):
        blob = encode_frame(0, np.zeros((2, 2, 3), np.uint8))[:-1]
        with pytest.raises(ValueError):
            decode_frame(blob)


class TestInit:
    def test_ready_and_first_chunk_deterministic(self, app):
        client = TestClient(app)
        first = []
        for _ in range(2):
            with client.websocket_connect("/session") as sock:
                sock.send_text(json.dumps({"type": "init", "seed": 7}))
                ready = json.loads(sock.receive_text())
                assert ready["type"] == "ready" and ready["w"] == 16 and ready["h"] == 16
                frames, _ = recv_until(sock, want_frames=4)
                first.append(np.stack([f[1] for f in frames]))
                sock.send_text(json.dumps({"type": "close"}))
        assert np.array_equal(first[0], first[1])
        # ground-truth condition: oracle renders at the spawn pose
        world = ws.generate_world(7, size=10)
        oracle = ws.render(world, ws.spawn_pose(world, ws.default_intrinsics(16)))
        assert np.array_equal(first[0][0], oracle)

    def test_bad_init_rejected(self, app):
        client = TestClient(app)
        with client.websocket_connect("/session") as sock:
            sock.send_text(json.dumps({"type": "init"}))  # missing seed
            msg = json.loads(sock.receive_text())
            assert msg == {"type": "error", "code": "bad_init"}

    def test_distinct_session_ids(self, app):
        client = TestClient(app)
        ids = set()
        socks = []
        for i in range(4):
            sock = client.websocket_connect("/session").__enter__()
            sock.send_text(json.dumps({"type": "init", "seed": 100 + i}))
            ids.add(json.loads(sock.receive_text())["session"])
            socks.append(sock)
        for sock in socks:
            sock.send_text(json.dumps({"type": "close"}))
            sock.__exit__(None, None, None)
        assert len(ids) == 4


class TestActions:
    def test_idle_session_generates(self, app):
        # liveness uses a timed tick; build a separate app with tick_ms=5
        cfg = tiny_cfg()
        params = init_params(cfg, seed=2)
        timed = build_app(params, cfg, tick_ms=5, world_size=10)
        client = TestClient(timed)
        with client.websocket_connect("/session") as sock:
            sock.send_text(json.dumps({"type": "init", "seed": 3}))
            json.loads(sock.receive_text())
            frames, _ = recv_until(sock, want_frames=8)  # idle chunk arrives unprompted
            assert len(frames) >= 8
            sock.send_text(json.dumps({"type": "close"}))

    def test_forward_advances_one_cell(self, app):
        client = TestClient(app)
        with client.websocket_connect("/session") as sock:
            sock.send_text(json.dumps({"type": "init", "seed": 11}))
            json.loads(sock.receive_text())
            for t in range(4):
                sock.send_text(json.dumps({"type": "action", "keys": ws.KEY_FORWARD, "tick": t}))
            frames, msgs = recv_until(sock, want_frames=8, want_stats=1)
            stats = [m for m in msgs if m["type"] == "stats"][0]
            world = ws.generate_world(11, size=10)
            spawn = ws.spawn_pose(world, ws.default_intrinsics(16))
            assert stats["pose"][0] == pytest.approx(spawn.translation[0] + 1.0)
            sock.send_text(json.dumps({"type": "close"}))


class TestScriptedReplay:
    def test_pose_trace_matches_offline_fold(self, app):
        """200-action scripted session: committed poses equal the offline
        step_pose fold, exactly (float-for-float through JSON)."""
        rng = np.random.default_rng(0)
        actions = [int(a) for a in rng.integers(0, 64, size=200)]
        client = TestClient(app)
        with client.websocket_connect("/session") as sock:
            sock.send_text(json.dumps({"type": "init", "seed": 21}))
            json.loads(sock.receive_text())
            for t, a in enumerate(actions):
                sock.send_text(json.dumps({"type": "action", "keys": a, "tick": t}))
            frames, msgs = recv_until(sock, want_frames=4 + len(actions),
                                      want_stats=len(actions) // 4)
            sock.send_text(json.dumps({"type": "close"}))
        indices = [f[0] for f in frames]
        assert indices == sorted(indices) and len(set(indices)) == len(indices)
        stats = [m for m in msgs if m["type"] == "stats"]
        world = ws.generate_world(21, size=10)
        pose = ws.spawn_pose(world, ws.default_intrinsics(16))
        offline = []
        for t, a in enumerate(actions):
            pose = ws.step_pose(pose, a & 0x3F, world)
            if t % 4 == 3:
                offline.append([pose.translation[0], pose.translation[1], pose.yaw])
        got = [m["pose"] for m in stats[: len(offline)]]
        assert got == offline  # byte-exact float replay


class TestLoopbackFixture:
    def test_key_bit_layout_shared_with_browser_client(self):
        """The browser client pins its action encoding against this same
        fixture; equality here closes the loopback."""
        import pathlib
        fixture_path = (pathlib.Path(__file__).parent.parent / "frontend" / "tests"
                        / "fixtures" / "key_timeline.json")
        fixture = json.loads(fixture_path.read_text())
        assert fixture["bindings"] == {
            "forward": ws.KEY_FORWARD, "back": ws.KEY_BACK,
            "strafe_left": ws.KEY_STRAFE_LEFT, "strafe_right": ws.KEY_STRAFE_RIGHT,
            "turn_left": ws.KEY_TURN_LEFT, "turn_right": ws.KEY_TURN_RIGHT,
        }
        # every scripted action decodes server-side to itself (6-bit mask)
        for keys in fixture["expected_keys"]:
            assert (keys & 0x3F) == keys
            pose = ws.CameraPose.from_yaw(5.0, 5.0, 0.0, ws.default_intrinsics(16))
            ws.keys_to_pose(pose, keys)  # must be a valid action


class TestSessionIsolation:
    def test_concurrent_sessions_do_not_crosstalk(self, app):
        client = TestClient(app)
        with client.websocket_connect("/session") as a, client.websocket_connect("/session") as b:
            a.send_text(json.dumps({"type": "init", "seed": 31}))
            b.send_text(json.dumps({"type": "init", "seed": 32}))
            ra = json.loads(a.receive_text())
            rb = json.loads(b.receive_text())
            assert ra["session"] != rb["session"]
            fa, _ = recv_until(a, want_frames=4)
            fb, _ = recv_until(b, want_frames=4)
            assert not np.array_equal(fa[0][1], fb[0][1])  # different worlds
            a.send_text(json.dumps({"type": "close"}))
            b.send_text(json.dumps({"type": "close"}))
