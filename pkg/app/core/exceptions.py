#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
统一异常定义

每个异常带一个 category，命令行入口据此输出单行可解析的错误信息并返回对应退出码。
"""


class VLMGANError(Exception):
    """所有业务异常的基类"""
    category = "error"
    exit_code = 1


class ConfigurationError(VLMGANError, ValueError):
    """配置错误：非法超参数、未知配置项、ToySpec 不合法等"""
    category = "configuration"
    exit_code = 2


class DataError(VLMGANError, ValueError):
    """数据错误：空文本、词表越界、批大小超过数据集、缺失图文对等"""
    category = "data"
    exit_code = 3


class ShapeError(VLMGANError, ValueError):
    """张量形状错误：分辨率、通道数、特征宽度、区域数不匹配"""
    category = "shape"
    exit_code = 4


class NumericError(VLMGANError, ValueError):
    """数值错误：概率行未归一化、矩阵非对称/非半正定、出现 NaN"""
    category = "numeric"
    exit_code = 5


class CheckpointError(VLMGANError, RuntimeError):
    """检查点缺失或 manifest 与当前配置不一致"""
    category = "checkpoint"
    exit_code = 6


class DivergenceError(VLMGANError, RuntimeError):
    """训练过程中损失出现非有限值"""
    category = "divergence"
    exit_code = 7
