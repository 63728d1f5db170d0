#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
共享数值内核

稳定 softmax / LogSumExp（均支持掩码与逆温度 γ）、带范数下限的余弦相似度、
对称半正定矩阵平方根的迹，以及对角高斯与标准正态之间的 KL。
匹配、损失、生成器与评价指标都只通过这里做这些运算。
"""

from typing import Optional

import numpy as np
import torch
from scipy import linalg

from app.core.exceptions import NumericError

# 所有余弦相似度共用的范数下限
EPS = 1e-8

# 负特征值容差：低于 -PSD_TOL 视为非半正定，[-PSD_TOL, 0) 截断为 0
PSD_TOL = 1e-6


def masked_softmax(
    x: torch.Tensor,
    gamma: float = 1.0,
    dim: int = -1,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    softmax(γ·x)，mask 为 False 的位置权重严格为 0

    mask 需可广播到 x。整行都被屏蔽时返回全 0 行而不是 NaN。
    """
    logits = x * gamma
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = mask.to(torch.bool).expand_as(logits)
    logits = logits.masked_fill(~mask, float("-inf"))
    # 整行屏蔽：先填 0 再把结果清零
    empty = ~mask.any(dim=dim, keepdim=True)
    logits = logits.masked_fill(empty, 0.0)
    weights = torch.softmax(logits, dim=dim)
    return weights.masked_fill(~mask, 0.0)


def logsumexp(
    x: torch.Tensor,
    gamma: float = 1.0,
    dim: int = -1,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """(1/γ)·log Σ exp(γ·x)，减最大值实现，屏蔽位置不参与求和"""
    if gamma <= 0:
        raise NumericError(f"logsumexp needs gamma > 0, got {gamma}")
    logits = x * gamma
    if mask is not None:
        logits = logits.masked_fill(~mask.to(torch.bool).expand_as(logits), float("-inf"))
    return torch.logsumexp(logits, dim=dim) / gamma


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    """逐对余弦：a·b / (max(‖a‖,ε)·max(‖b‖,ε))"""
    dot = (a * b).sum(dim=dim)
    return dot / (a.norm(dim=dim).clamp_min(eps) * b.norm(dim=dim).clamp_min(eps))


def cosine_matrix(x: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """
    两组向量的余弦矩阵

    x: (..., n, d), y: (..., m, d) -> (..., n, m)
    """
    return l2_normalize(x, eps=eps) @ l2_normalize(y, eps=eps).transpose(-1, -2)


def gaussian_kl_diag(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(μ, σ²) ‖ N(0, I)) = ½Σ(μ² + σ² − 1 − log σ²)，对最后一维求和"""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def _as_symmetric(name: str, c, tol: float) -> np.ndarray:
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise NumericError(f"{name} must be a square matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise NumericError(f"{name} contains NaN or Inf")
    scale = max(1.0, float(np.abs(c).max()))
    if np.abs(c - c.T).max() > tol * scale:
        raise NumericError(f"{name} is not symmetric within tolerance {tol}")
    return 0.5 * (c + c.T)


def _clamped_eigvals(name: str, w: np.ndarray, tol: float) -> np.ndarray:
    # 绝对下界 -tol，不随矩阵尺度放宽
    if w.size and w.min() < -tol:
        raise NumericError(f"{name} has eigenvalue {w.min():.3e} below -{tol}")
    return np.clip(w, 0.0, None)


def psd_sqrt(c, tol: float = PSD_TOL) -> np.ndarray:
    """对称半正定矩阵的主平方根（特征分解，负特征值截断）"""
    c = _as_symmetric("matrix", c, tol)
    w, v = linalg.eigh(c)
    w = _clamped_eigvals("matrix", w, tol)
    return (v * np.sqrt(w)) @ v.T


def psd_sqrt_trace(c, c_r, tol: float = PSD_TOL) -> float:
    """
    Tr((C·C_r)^{1/2})

    C·C_r 与 C^{1/2}·C_r·C^{1/2} 相似，后者对称半正定，
    所以迹等于后者特征值平方根之和。
    """
    c = _as_symmetric("C", c, tol)
    c_r = _as_symmetric("C_r", c_r, tol)
    if c.shape != c_r.shape:
        raise NumericError(f"dimension mismatch: {c.shape} vs {c_r.shape}")
    root = psd_sqrt(c, tol)
    m = root @ c_r @ root
    m = 0.5 * (m + m.T)
    w = _clamped_eigvals("C^1/2 C_r C^1/2", linalg.eigvalsh(m), tol)
    return float(np.sqrt(w).sum())
