#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Compact storage for loss histories.

- Iteration axis: parameterized as {i0, n, di}
- Values: float32 delta + lz4 compression
  * format: {"codec": "lz4-f32-delta", "data": base64_str}
- A history is {"iterations": {...}, "series": {name: encoded values}}
"""

from __future__ import annotations

import base64
from typing import Any, Dict, List, Mapping, Sequence

import lz4.frame
import numpy as np

CODEC = "lz4-f32-delta"


def encode_iterations(iterations: Sequence[int]) -> Dict[str, int]:
    """Encode an evenly spaced iteration axis. Raises if the spacing is irregular."""
    n = len(iterations)
    if n == 0:
        return {"i0": 0, "n": 0, "di": 0}
    i0 = int(iterations[0])
    if n == 1:
        return {"i0": i0, "n": 1, "di": 0}
    steps = np.diff(np.asarray(iterations, dtype=np.int64))
    if (steps != steps[0]).any():
        raise ValueError("iteration axis must be evenly spaced")
    return {"i0": i0, "n": n, "di": int(steps[0])}


def decode_iterations(encoded: Mapping[str, int]) -> List[int]:
    i0, n, di = int(encoded.get("i0", 0)), int(encoded.get("n", 0)), int(encoded.get("di", 0))
    return [i0 + k * di for k in range(max(n, 0))]


def encode_values(values: Sequence[float]) -> Dict[str, Any]:
    """Layout before compression: [v0_f32][d1_f32]...[d{n-1}_f32] with di = v{i} - v{i-1}."""
    if len(values) == 0:
        return {"codec": CODEC, "data": ""}
    v = np.asarray(values, dtype=np.float64)
    deltas = np.concatenate([v[:1], np.diff(v)]).astype("<f4")
    compressed = lz4.frame.compress(deltas.tobytes(), compression_level=lz4.frame.COMPRESSIONLEVEL_MINHC)
    return {"codec": CODEC, "data": base64.b64encode(compressed).decode("ascii")}


def decode_values(encoded: Mapping[str, Any]) -> List[float]:
    codec, data = encoded.get("codec"), encoded.get("data")
    if not data:
        return []
    if codec != CODEC:
        raise ValueError(f"Unsupported codec: {codec}. Expected '{CODEC}'")
    raw = lz4.frame.decompress(base64.b64decode(data))
    deltas = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return np.cumsum(deltas).tolist()


def encode_history(iterations: Sequence[int], series: Mapping[str, Sequence[float]]) -> Dict[str, Any]:
    for name, values in series.items():
        if len(values) != len(iterations):
            raise ValueError(f"series {name!r} has {len(values)} points, expected {len(iterations)}")
    return {
        "iterations": encode_iterations(iterations),
        "series": {name: encode_values(values) for name, values in series.items()},
    }


def decode_history(encoded: Mapping[str, Any]) -> Dict[str, List[float]]:
    """Returns {"iter": [...], name: [...], ...}"""
    out: Dict[str, List[float]] = {"iter": decode_iterations(encoded.get("iterations", {}))}
    for name, values in encoded.get("series", {}).items():
        out[name] = decode_values(values)
    return out


# ------------------------ Downsampling helpers ------------------------
def _calc_stride(length: int, max_points: int) -> int:
    if max_points is None or max_points <= 0 or length <= max_points:
        return 1
    # ceil division
    return (length + max_points - 1) // max_points


def downsample_series(xs: list, ys: list, max_points: int = 2100) -> tuple[list, list]:
    """Downsample paired x/y lists by uniform stride, always keeping the last point."""
    n = min(len(xs), len(ys))
    stride = _calc_stride(n, max_points)
    if stride <= 1:
        return list(xs[:n]), list(ys[:n])
    idxs = list(range(0, n, stride))
    if idxs[-1] != n - 1:
        idxs.append(n - 1)
    return [xs[i] for i in idxs], [ys[i] for i in idxs]
