"""Checkpoint binary format and manifest round trips."""

import json
import struct

import numpy as np
import pytest

from streamworld import tensor as T
from streamworld.checkpoint import (config_hash, load_checkpoint, params_fingerprint,
                                    read_tensor, save_checkpoint, write_tensor)
from streamworld.rng import Rng


class TestTensorFile:
    def test_header_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "t.wpt"
        write_tensor(path, arr)
        blob = path.read_bytes()
        assert blob[:4] == b"WPT0"
        rank = blob[4]
        assert rank == 2
        assert struct.unpack("<2I", blob[5:13]) == (2, 3)
        assert np.frombuffer(blob[13:], dtype="<f4").tolist() == arr.reshape(-1).tolist()

    def test_roundtrip_all_ranks(self, tmp_path):
        rng = Rng(0)
        for i, shape in enumerate([(), (5,), (3, 4), (2, 3, 4)]):
            arr = rng.randn(*shape, dtype=np.float32) if shape else np.float32(2.5)
            path = tmp_path / f"r{i}.wpt"
            write_tensor(path, np.asarray(arr))
            back = read_tensor(path)
            assert back.shape == tuple(shape)
            assert np.array_equal(back, np.asarray(arr, dtype=np.float32))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.wpt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            read_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.wpt"
        write_tensor(p, np.zeros((4, 4), np.float32))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError):
            read_tensor(p)


class TestCheckpoint:
    def test_roundtrip_with_manifest(self, tmp_path):
        rng = Rng(1)
        params = {
            "patch_in.w": T.Tensor(rng.randn(4, 8), requires_grad=True),
            "blocks.0.attn.pose_gate": T.Tensor(np.float32(0.25), requires_grad=True),
        }
        config = {"dim": 8, "heads": 2}
        save_checkpoint(tmp_path / "ckpt", params, config)
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(config)
        assert set(manifest["params"]) == set(params)
        back, cfg = load_checkpoint(tmp_path / "ckpt")
        assert cfg == config
        assert params_fingerprint(back) == params_fingerprint(params)
        assert back["blocks.0.attn.pose_gate"].data.shape == ()

    def test_fingerprint_changes_with_values(self):
        a = {"w": T.Tensor(np.zeros(3), requires_grad=True)}
        b = {"w": T.Tensor(np.ones(3), requires_grad=True)}
        assert params_fingerprint(a) != params_fingerprint(b)
