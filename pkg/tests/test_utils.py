#!/usr/bin/env python
# -*- coding: utf-8 -*-

import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from app.core.exceptions import DataError
from app.core.history import LossHistory, MetricsLog
from app.core.runtime import RngStreams
from app.schemas.report import LossReport
from app.utils.json_sanitize import dumps, finite_or_none, read_json, sanitize_for_json, write_json
from app.utils.series_codec import (
    decode_history,
    decode_iterations,
    decode_values,
    downsample_series,
    encode_history,
    encode_iterations,
    encode_values,
)


# ------------------------ JSON ------------------------
def test_sanitize_replaces_non_finite_and_converts_arrays():
    obj = {
        "a": float("nan"),
        "b": np.float32(1.5),
        "c": np.arange(3),
        "d": torch.tensor([1.0, float("inf")]),
        "e": Path("x/y"),
        1: (np.bool_(True), None),
    }
    assert sanitize_for_json(obj) == {"a": None, "b": 1.5, "c": [0, 1, 2], "d": [1.0, None], "e": "x/y",
                                      "1": [True, None]}
    assert finite_or_none(float("-inf")) is None
    assert finite_or_none("text") == "text"


def test_write_json_is_strict_and_sorted(tmp_path):
    path = write_json(tmp_path / "out" / "m.json", {"b": 1, "a": float("nan")})
    assert read_json(path) == {"a": None, "b": 1}
    assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')


# ------------------------ 序列压缩 ------------------------
def test_iteration_axis_encoding():
    assert encode_iterations([]) == {"i0": 0, "n": 0, "di": 0}
    assert decode_iterations(encode_iterations([5, 10, 15])) == [5, 10, 15]
    assert decode_iterations(encode_iterations([7])) == [7]
    with pytest.raises(ValueError):
        encode_iterations([1, 2, 4])


def test_value_encoding_keeps_float32_precision():
    values = [0.5, 0.25, 1e-3, 3.0]
    decoded = decode_values(encode_values(values))
    assert np.allclose(decoded, values, atol=1e-6)
    assert decode_values(encode_values([])) == []
    with pytest.raises(ValueError):
        decode_values({"codec": "other", "data": "abc"})


def test_history_encoding_checks_lengths():
    with pytest.raises(ValueError):
        encode_history([1, 2], {"L": [1.0]})
    decoded = decode_history(encode_history([1, 2], {"L": [1.0, 2.0]}))
    assert decoded["iter"] == [1, 2]


def test_downsample_keeps_last_point():
    xs = list(range(10))
    ys = [x * 2 for x in xs]
    dx, dy = downsample_series(xs, ys, max_points=4)
    assert dx[0] == 0 and dx[-1] == 9
    assert dy == [x * 2 for x in dx]
    assert downsample_series(xs, ys, max_points=100) == (xs, ys)


# ------------------------ 训练记录 ------------------------
def _report(v):
    return LossReport(L_local=v, L_global=v, L_general=v, L_VLM=3 * v)


def test_loss_history_append_save_load(tmp_path):
    history = LossHistory()
    for i, v in enumerate([1.0, 0.5, 0.25], start=1):
        history.append(i, _report(v))
    assert len(history) == 3
    assert history.last()["L_VLM"] == pytest.approx(0.75)
    with pytest.raises(DataError):
        history.append(4, LossReport(L_VG=1.0))

    loaded = LossHistory.load(history.save(tmp_path / "loss_history.json"))
    assert loaded.iterations == [1, 2, 3]
    assert np.allclose(loaded.series["L_VLM"], [3.0, 1.5, 0.75], atol=1e-6)
    assert LossHistory.from_state_dict(history.state_dict()) == history
    with pytest.raises(DataError):
        LossHistory.load(tmp_path / "missing.json")


def test_metrics_log_truncates_on_resume(tmp_path):
    path = tmp_path / "metrics.log"
    log = MetricsLog(path)
    for i in range(1, 5):
        log.write(i, _report(float(i)))
    assert [row["iter"] for row in log.read()] == [1, 2, 3, 4]

    resumed = MetricsLog(path, resume_from=2)
    assert [row["iter"] for row in resumed.read()] == [1, 2]
    resumed.write(3, _report(9.0))
    assert resumed.read()[-1]["L_VLM"] == pytest.approx(27.0)

    MetricsLog(path)
    assert path.read_text(encoding="utf-8") == ""


# ------------------------ 随机流 ------------------------
def test_rng_streams_are_reproducible_and_restorable():
    a, b = RngStreams.from_seed(5), RngStreams.from_seed(5)
    assert a.data.integers(1 << 30) == b.data.integers(1 << 30)
    assert torch.equal(torch.randn(3, generator=a.noise), torch.randn(3, generator=b.noise))
    # 三条流互不相同
    assert not torch.equal(torch.randn(3, generator=a.noise), torch.randn(3, generator=a.ca))

    state = a.state_dict()
    json.dumps(state["data"])
    expected = (a.data.random(), torch.randn(2, generator=a.noise), torch.randn(2, generator=a.ca))
    a.load_state_dict(state)
    assert a.data.random() == expected[0]
    assert torch.equal(torch.randn(2, generator=a.noise), expected[1])
    assert torch.equal(torch.randn(2, generator=a.ca), expected[2])
    assert not math.isclose(RngStreams.from_seed(6).data.random(), RngStreams.from_seed(5).data.random())
