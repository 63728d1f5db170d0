#!/usr/bin/env python
# -*- coding: utf-8 -*-

import tomllib
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

DEFAULT_VERSION = "0.0.0"
PYPROJECT = Path(__file__).resolve().parents[2] / "pyproject.toml"


def read_version(path: Path = PYPROJECT) -> str:
    """版本号取自 pyproject.toml 的 [tool.poetry]；以包形式安装后文件不在时退回默认值"""
    try:
        with open(path, "rb") as f:
            return tomllib.load(f).get("tool", {}).get("poetry", {}).get("version", DEFAULT_VERSION)
    except (OSError, tomllib.TOMLDecodeError):
        return DEFAULT_VERSION


class Settings(BaseSettings):
    """进程级配置，来源于环境变量（前缀 VLMGAN_）和 .env 文件"""
    model_config = SettingsConfigDict(env_prefix="VLMGAN_", env_file=".env", extra="ignore")

    VERSION: str = read_version()
    LOG_LEVEL: str = "INFO"
    DEVICE: str = "cpu"

    # 可复现模式：单线程 + 确定性算法
    DETERMINISTIC: bool = True
    NUM_THREADS: int = 1

    # 长循环是否显示进度条
    PROGRESS_BAR: bool = True


settings = Settings()
