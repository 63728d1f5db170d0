#!/usr/bin/env python
# -*- coding: utf-8 -*-

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import torch


def finite_or_none(value: Any) -> Any:
    """能转成有限浮点数的返回该浮点数，NaN / Inf 返回 None，非数值原样返回"""
    try:
        number = float(value)
    except (TypeError, ValueError):
        return value
    return number if math.isfinite(number) else None


def sanitize_for_json(obj: Any, replace_with: Any | None = None) -> Any:
    """
    递归转换为可严格序列化的 JSON 结构

    NaN / Inf 替换为 replace_with；numpy / torch 的标量与数组转成 Python 数值和列表；
    Path 转字符串，pydantic 模型先 model_dump。
    """
    if obj is None or isinstance(obj, (str, bool)):
        return obj
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else replace_with
    if isinstance(obj, torch.Tensor):
        obj = obj.detach().cpu().numpy()
    if isinstance(obj, np.ndarray):
        return sanitize_for_json(obj.tolist(), replace_with)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): sanitize_for_json(v, replace_with) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [sanitize_for_json(v, replace_with) for v in obj]
    if callable(getattr(obj, "model_dump", None)):
        return sanitize_for_json(obj.model_dump(), replace_with)
    return obj


def dumps(obj: Any) -> str:
    """严格 JSON，键排序，缩进 2"""
    return json.dumps(sanitize_for_json(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)


def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
