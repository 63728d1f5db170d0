#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
训练过程记录：逐步损失历史 + 追加写的指标日志
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Union

from app.core.exceptions import DataError
from app.schemas.report import LossReport, parse_log_line
from app.utils.json_sanitize import read_json, write_json
from app.utils.series_codec import decode_history, encode_history


@dataclass
class LossHistory:
    """按日志步记录的扁平损失序列，所有序列与 iterations 等长"""
    iterations: List[int] = field(default_factory=list)
    series: Dict[str, List[float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.iterations)

    def append(self, iteration: int, report: LossReport):
        flat = report.as_dict()
        if self.iterations and set(flat) != set(self.series):
            raise DataError(f"loss keys changed at iter={iteration}: {sorted(flat)} vs {sorted(self.series)}")
        self.iterations.append(int(iteration))
        for key, value in flat.items():
            self.series.setdefault(key, []).append(float(value))

    def last(self) -> Dict[str, float]:
        return {key: values[-1] for key, values in self.series.items()} if self.iterations else {}

    def state_dict(self) -> Dict[str, Any]:
        return {"iterations": list(self.iterations), "series": {k: list(v) for k, v in self.series.items()}}

    @classmethod
    def from_state_dict(cls, state: Mapping[str, Any]) -> "LossHistory":
        return cls(
            iterations=[int(i) for i in state.get("iterations", [])],
            series={k: [float(x) for x in v] for k, v in state.get("series", {}).items()},
        )

    def save(self, path: Union[str, Path]) -> Path:
        """lz4 压缩的 JSON"""
        return write_json(path, encode_history(self.iterations, self.series))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LossHistory":
        path = Path(path)
        if not path.exists():
            raise DataError(f"loss history not found: {path}")
        decoded = decode_history(read_json(path))
        iterations = decoded.pop("iter")
        return cls(iterations=iterations, series=decoded)


class MetricsLog:
    """指标日志，每个日志步一行 iter=<n> key=value ..."""

    def __init__(self, path: Union[str, Path], resume_from: int = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_from is None:
            self.path.write_text("", encoding="utf-8")
        else:
            self.truncate_after(resume_from)

    def write(self, iteration: int, report: LossReport):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(report.to_log_line(iteration) + "\n")

    def truncate_after(self, iteration: int):
        """续训时丢弃检查点之后写入的行"""
        if not self.path.exists():
            self.path.write_text("", encoding="utf-8")
            return
        kept = [line for line in self.path.read_text(encoding="utf-8").splitlines()
                if line.strip() and parse_log_line(line)["iter"] <= iteration]
        self.path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")

    def read(self) -> List[Dict[str, float]]:
        if not self.path.exists():
            return []
        return [parse_log_line(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]
