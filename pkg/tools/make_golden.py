#!/usr/bin/env python3
"""Regenerate the golden wire-protocol blobs under golden/.

The values are simple closed-form patterns so any implementation, in any
language, can reconstruct them without sharing code: run this after a
deliberate protocol change, never to paper over a failing round-trip test.
"""

import hashlib
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from egworld.service import (  # noqa: E402
    MSG_HELLO,
    MSG_RESET,
    MSG_STATS,
    PoseFrame,
    encode_frame_chunk,
    encode_json_message,
    encode_message,
    encode_pose_update,
)

OUT = os.path.join(os.path.dirname(__file__), "..", "golden")

POSE_SEQ = 7
POSE_TIMESTAMP_US = 123456789
CHUNK_INDEX = 3
CHUNK_F, CHUNK_H, CHUNK_W = 2, 6, 8

STATS = {
    "chunk_index": 3,
    "chunk_ms": 125.5,
    "cond_ms": 2.25,
    "dropped": 1,
    "fps": 95.5,
    "pose_seq": 42,
    "pose_timestamp_us": 777000,
    "staleness_ms": 12.5,
}

HELLO = {
    "capacity": 64,
    "chunk": 12,
    "context": 4,
    "height": 48,
    "strategy": "hybrid",
    "version": 1,
    "width": 48,
}


def golden_pose() -> PoseFrame:
    # every value is exactly representable in float32
    hpp = np.array([(j - 26) / 32.0 for j in range(52)], dtype=np.float32)
    camera = np.array([1, 0, 0, 0, 1, 0, 0, 0, 1, 0.125, -0.25, 0.5],
                      dtype=np.float32)
    intr = np.array([48.0, 48.0, 24.0, 24.0], dtype=np.float32)
    return PoseFrame(seq=POSE_SEQ, timestamp_us=POSE_TIMESTAMP_US,
                     hpp=hpp, camera=camera, intrinsics=intr)


def golden_frames() -> np.ndarray:
    n = CHUNK_F * CHUNK_H * CHUNK_W * 3
    flat = np.array([(k * 13 + 7) % 256 for k in range(n)], dtype=np.uint8)
    return flat.reshape(CHUNK_F, CHUNK_H, CHUNK_W, 3)


def main() -> None:
    os.makedirs(OUT, exist_ok=True)
    blobs = {
        "pose_update.bin": encode_pose_update(golden_pose()),
        "frame_chunk.bin": encode_frame_chunk(CHUNK_INDEX, golden_frames()),
        "stats.bin": encode_json_message(MSG_STATS, STATS),
        "hello.bin": encode_json_message(MSG_HELLO, HELLO),
        "reset.bin": encode_message(MSG_RESET),
    }
    manifest = {
        "framing": "u32le payload length, u8 type, payload",
        "types": {"hello": 0, "pose_update": 1, "frame_chunk": 2,
                  "stats": 3, "error": 4, "reset": 5},
        "pose_update": {
            "seq": POSE_SEQ,
            "timestamp_us": POSE_TIMESTAMP_US,
            "hpp_rule": "hpp[j] = (j - 26) / 32 for j in 0..51",
            "camera": [1, 0, 0, 0, 1, 0, 0, 0, 1, 0.125, -0.25, 0.5],
            "intrinsics": [48.0, 48.0, 24.0, 24.0],
        },
        "frame_chunk": {
            "index": CHUNK_INDEX,
            "frames": CHUNK_F,
            "height": CHUNK_H,
            "width": CHUNK_W,
            "byte_rule": "byte[k] = (k * 13 + 7) % 256 for k in 0..f*h*w*3-1",
        },
        "stats": STATS,
        "hello": HELLO,
        "sha256": {},
    }
    for name, blob in blobs.items():
        with open(os.path.join(OUT, name), "wb") as f:
            f.write(blob)
        manifest["sha256"][name] = hashlib.sha256(blob).hexdigest()
    with open(os.path.join(OUT, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    for name in sorted(blobs):
        print(f"{manifest['sha256'][name]}  {name}")


if __name__ == "__main__":
    main()
