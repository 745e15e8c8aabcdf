"""Weight checkpoint container: named float64 blocks plus JSON metadata.

Values are stored as C hex-float strings (``float.hex``), which round-trip
bit-exactly through text, so a save/load cycle reproduces every weight
down to the last bit. The container is version-tagged and self-describing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "vexplain-checkpoint"
VERSION = 1


def save_blocks(path, kind: str, blocks: dict[str, np.ndarray], meta: dict) -> None:
    """Write a checkpoint with the given named weight blocks and metadata."""
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta,
        "blocks": {
            name: {
                "shape": list(arr.shape),
                "data": [v.hex() for v in np.asarray(arr, dtype=np.float64).ravel().tolist()],
            }
            for name, arr in blocks.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_blocks(path) -> tuple[str, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (kind, blocks, meta)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    blocks = {}
    for name, block in payload["blocks"].items():
        data = np.array([float.fromhex(s) for s in block["data"]], dtype=np.float64)
        blocks[name] = data.reshape(block["shape"])
    return payload["kind"], blocks, payload["meta"]
