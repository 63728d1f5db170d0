#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
日志工具

所有模块通过 get_logger(__name__) 获取 logger，共享同一个 handler 与格式。
"""

import logging
import sys

from app.core.config import settings

_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
_ROOT = "app"
_configured = False


def setup_logging(level: str = None):
    """初始化根 logger，重复调用只更新级别"""
    global _configured
    root = logging.getLogger(_ROOT)
    if level is not None:
        root.setLevel(level.upper())
    if not _configured:
        if level is None:
            root.setLevel(settings.LOG_LEVEL.upper())
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    return root


def get_logger(name: str) -> logging.Logger:
    setup_logging()
    return logging.getLogger(name)
