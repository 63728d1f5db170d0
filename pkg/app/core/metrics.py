#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
评价指标内核：IS、FID、R-precision 排名、VLMS 汇总

这里只做与模型无关的纯数值计算；特征提取与编码在 app/service/evaluation_service.py。
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import rel_entr

from app.core.exceptions import DataError, NumericError
from app.core.numerics import PSD_TOL, psd_sqrt_trace

# 概率行归一化容差
ROW_SUM_TOL = 1e-6


def _check_probabilities(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise NumericError(f"expected a non-empty N×K probability table, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise NumericError("probability table contains negative or non-finite entries")
    if np.abs(p.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
        raise NumericError("probability rows do not sum to 1")
    return p


def inception_score(probs) -> float:
    """IS = exp(mean_x KL(p(y|x) ‖ p(y)))，p(y) 为行均值"""
    p = _check_probabilities(probs)
    marginal = p.mean(axis=0, keepdims=True)
    kl = rel_entr(p, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score_splits(probs, n_splits: int = 10) -> Tuple[float, float]:
    """按连续划分分别计算 IS，返回 (均值, 标准差)"""
    p = _check_probabilities(probs)
    n_splits = max(1, min(n_splits, p.shape[0]))
    scores = [inception_score(part) for part in np.array_split(p, n_splits)]
    return float(np.mean(scores)), float(np.std(scores))


@dataclass(frozen=True)
class GaussianStats:
    m: np.ndarray
    C: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.m.shape[0])


def gaussian_stats(features) -> GaussianStats:
    """样本均值与无偏协方差"""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected N×d features, got shape {x.shape}")
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 samples for a covariance, got {x.shape[0]}")
    if not np.isfinite(x).all():
        raise NumericError("features contain NaN or Inf")
    m = x.mean(axis=0)
    centered = x - m
    c = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(m=m, C=0.5 * (c + c.T))


def fid(a: GaussianStats, b: GaussianStats, tol: float = PSD_TOL) -> float:
    """FID = ‖m − m_r‖² + Tr(C + C_r − 2(C·C_r)^{1/2})"""
    if a.dim != b.dim or a.C.shape != b.C.shape:
        raise NumericError(f"dimension mismatch: {a.dim} vs {b.dim}")
    for name, stats in (("a", a), ("b", b)):
        if not (np.isfinite(stats.m).all() and np.isfinite(stats.C).all()):
            raise NumericError(f"stats {name} contain NaN or Inf")
    diff = a.m - b.m
    value = float(diff @ diff + np.trace(a.C) + np.trace(b.C) - 2.0 * psd_sqrt_trace(a.C, b.C, tol))
    if value < -tol:
        raise NumericError(f"FID came out negative: {value:.3e}")
    return max(value, 0.0)


def sample_distractors(rng: np.random.Generator, caption_owner: Sequence[int], query_owner: int, k: int) -> np.ndarray:
    """从不属于 query_owner 这张图的描述中不放回均匀采样 k 个下标，按下标升序返回"""
    owners = np.asarray(caption_owner)
    eligible = np.flatnonzero(owners != query_owner)
    if k > len(eligible):
        raise DataError(f"need {k} distractor captions but only {len(eligible)} are available")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(eligible, size=k, replace=False))


def retrieval_hits(query, candidates, candidate_ids, true_col) -> np.ndarray:
    """
    每个查询在候选集合中按余弦相似度检索，命中 = 排名第一的是真描述

    query (N, D)，candidates (N, P, D)，candidate_ids (N, P) 用于打破平局（下标小者优先），
    true_col (N,) 是真描述所在列。
    """
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    ids = np.asarray(candidate_ids, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-8)
    cn = c / np.maximum(np.linalg.norm(c, axis=-1, keepdims=True), 1e-8)
    cos = np.einsum("nd,npd->np", qn, cn)
    is_max = cos >= cos.max(axis=1, keepdims=True)
    winner = np.where(is_max, ids, np.inf).argmin(axis=1)
    return winner == np.asarray(true_col)


def split_mean_std(values, n_splits: int = 10) -> Tuple[float, float]:
    """按连续划分求均值，再对各划分均值求 (均值, 标准差)"""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("cannot aggregate an empty set of values")
    n_splits = max(1, min(n_splits, v.size))
    means = [part.mean() for part in np.array_split(v, n_splits)]
    return float(np.mean(means)), float(np.std(means))


def vlms_summary(scores) -> Tuple[float, float]:
    """VLMS = MSB 得分的 (均值, 标准差)"""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DataError("cannot summarize an empty set of scores")
    if not np.isfinite(s).all() or (s <= 0).any() or (s >= 1).any():
        raise NumericError("VLMS scores must lie strictly inside (0, 1)")
    return float(s.mean()), float(s.std())
