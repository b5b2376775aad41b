"""Writer/reader for the SFG1 interchange format consumed by the pipeline.

Layout: magic "SFG1" | u32 h | u32 w | u32 c | u32 patch_stride_px |
h*w*c little-endian float32, patch-row-major, channel-fastest. Kept
independent of the pipeline package on purpose: the two sides only meet
at the byte level.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFG1"
_HEADER = struct.Struct("<4sIIII")


def write_sfg(path: str | Path, features: np.ndarray, patch_stride_px: int) -> None:
    """features: (h, w, c) array, finite, stored as little-endian f32."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 3 or min(feats.shape) < 1:
        raise ValueError("features must be (h, w, c) with all dims >= 1")
    if not np.isfinite(feats).all():
        raise ValueError("non-finite feature value")
    h, w, c = feats.shape
    payload = _HEADER.pack(MAGIC, h, w, c, patch_stride_px) + feats.tobytes()
    Path(path).write_bytes(payload)


def read_sfg(path: str | Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an SFG1 file")
    _, h, w, c, stride = _HEADER.unpack_from(raw)
    if len(raw) != _HEADER.size + 4 * h * w * c:
        raise ValueError(f"{path}: truncated payload")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return data.copy(), stride
