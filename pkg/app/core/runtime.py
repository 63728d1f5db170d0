#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
运行时：确定性模式与随机流

一次运行只使用三条随机流：data（批采样，numpy）、noise（z 噪声，torch）、ca（条件增强 ε，torch），
全部由一个种子经 SeedSequence 派生，并能随检查点一起保存/恢复。
"""

import json
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
import torch

from app.core.config import settings
from app.utils.logger import get_logger

logger = get_logger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def configure_runtime(deterministic: bool = None, num_threads: int = None):
    """确定性模式下单线程 + 确定性算法"""
    deterministic = settings.DETERMINISTIC if deterministic is None else deterministic
    num_threads = settings.NUM_THREADS if num_threads is None else num_threads
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    elif num_threads > 0:
        torch.set_num_threads(num_threads)
    logger.debug(f"[Runtime] deterministic={deterministic} threads={torch.get_num_threads()}")


def resolve_device(name: str = None) -> torch.device:
    name = name or settings.DEVICE
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"[Runtime] device {name} unavailable, falling back to cpu")
        name = "cpu"
    return torch.device(name)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@dataclass
class RngStreams:
    data: np.random.Generator
    noise: torch.Generator
    ca: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        data_seq, noise_seq, ca_seq = np.random.SeedSequence(seed).spawn(3)
        return cls(
            data=np.random.default_rng(data_seq),
            noise=torch_generator(int(noise_seq.generate_state(1, dtype=np.uint64)[0] >> 1)),
            ca=torch_generator(int(ca_seq.generate_state(1, dtype=np.uint64)[0] >> 1)),
        )

    def state_dict(self) -> Dict[str, Any]:
        # numpy 状态里有 128 位整数，转成 JSON 字符串保存
        return {
            "data": json.dumps(self.data.bit_generator.state),
            "noise": self.noise.get_state(),
            "ca": self.ca.get_state(),
        }

    def load_state_dict(self, state: Dict[str, Any]):
        self.data.bit_generator.state = json.loads(state["data"])
        self.noise.set_state(state["noise"])
        self.ca.set_state(state["ca"])
