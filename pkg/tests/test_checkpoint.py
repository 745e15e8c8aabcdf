"""Checkpoint container: bit-exact round trips and validation."""

import json

import numpy as np
import pytest

from vexplain.checkpoint import load_blocks, save_blocks


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    blocks = {
        "w": rng.normal(size=(7, 3)) * 1e-7,
        "b": np.array([0.0, -0.0, 1.0 / 3.0, 2**-1074, -1.737281e300]),
    }
    meta = {"hidden": 7, "flags": {"use_image": True}}
    path = tmp_path / "model.ckpt"
    save_blocks(path, "generator", blocks, meta)
    kind, loaded, loaded_meta = load_blocks(path)
    assert kind == "generator"
    assert loaded_meta == meta
    for name, arr in blocks.items():
        assert loaded[name].shape == arr.shape
        # bit-exact, including signed zeros and subnormals
        assert np.array_equal(
            loaded[name].view(np.uint64), arr.view(np.uint64)
        ), name


def test_save_load_save_identical_bytes(tmp_path):
    rng = np.random.default_rng(1)
    blocks = {"w": rng.normal(size=(4, 4))}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_blocks(p1, "classifier", blocks, {"k": 2})
    _, loaded, meta = load_blocks(p1)
    save_blocks(p2, "classifier", loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_wrong_format(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_text(json.dumps({"format": "something-else", "version": 1, "blocks": {}}))
    with pytest.raises(ValueError, match="not a"):
        load_blocks(path)


def test_rejects_wrong_version(tmp_path):
    path = tmp_path / "old.ckpt"
    path.write_text(
        json.dumps({"format": "vexplain-checkpoint", "version": 99, "blocks": {}, "meta": {}})
    )
    with pytest.raises(ValueError, match="version"):
        load_blocks(path)
