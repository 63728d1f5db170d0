#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
三个匹配层级中的局部与全局两级

局部：词 -> 区域注意力得到每个词的上下文向量 c_i，再对 cos(c_i, φ_i) 做 LogSumExp 池化。
全局：图像全局特征与句特征的余弦。
第三级（MSB）是可训练模块，见 app/models/msb.py。

张量约定：regions (..., D, R)，words (..., D, T)，mask (..., T)，前导维度可广播。
"""

from typing import Optional

import torch

from app.core.exceptions import ShapeError
from app.core.numerics import EPS, cosine_matrix, cosine_similarity, logsumexp, masked_softmax


def _check_width(regions: torch.Tensor, words: torch.Tensor):
    if regions.shape[-2] != words.shape[-2]:
        raise ShapeError(f"feature width mismatch: regions D={regions.shape[-2]}, words D={words.shape[-2]}")


def region_word_similarity(
    regions: torch.Tensor,
    words: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    eps: float = EPS,
) -> torch.Tensor:
    """
    s[i, j] = cos(ϕ_i, φ_j)，返回 (..., R, T)

    被屏蔽的词列置 0。
    """
    _check_width(regions, words)
    s = cosine_matrix(regions.transpose(-1, -2), words.transpose(-1, -2), eps=eps)
    if mask is not None:
        s = s.masked_fill(~mask.to(torch.bool).unsqueeze(-2), 0.0)
    return s


def word_attention(
    regions: torch.Tensor,
    words: torch.Tensor,
    gamma1: float = 4.0,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """每个词在区域上的注意力 α，(..., R, T)，对 R 求和为 1；被屏蔽的词列全 0"""
    s = region_word_similarity(regions, words, mask)
    alpha = masked_softmax(s, gamma=gamma1, dim=-2)
    if mask is not None:
        alpha = alpha.masked_fill(~mask.to(torch.bool).unsqueeze(-2), 0.0)
    return alpha


def word_context(
    regions: torch.Tensor,
    words: torch.Tensor,
    gamma1: float = 4.0,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """c_i = Σ_j α_ij ϕ_j，返回 (..., D, T)"""
    alpha = word_attention(regions, words, gamma1, mask)
    # (..., D, R) @ (..., R, T) --> (..., D, T)
    return regions @ alpha


def word_context_similarity(
    regions: torch.Tensor,
    words: torch.Tensor,
    gamma1: float = 4.0,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """R(c_i, φ_i) = cos(c_i, φ_i)，(..., T)"""
    context = word_context(regions, words, gamma1, mask)
    return cosine_similarity(context, words, dim=-2)


def local_matching_score(
    regions: torch.Tensor,
    words: torch.Tensor,
    gamma1: float = 4.0,
    gamma2: float = 5.0,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """S_local = (1/γ₂)·log Σ_i exp(γ₂·cos(c_i, φ_i))，只对有效词求和"""
    sims = word_context_similarity(regions, words, gamma1, mask)
    return logsumexp(sims, gamma=gamma2, dim=-1, mask=mask)


def global_matching_score(image_global: torch.Tensor, sentence: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """S_global = cos(ϕ̄, φ̄)"""
    if image_global.shape[-1] != sentence.shape[-1]:
        raise ShapeError(f"feature width mismatch: {image_global.shape[-1]} vs {sentence.shape[-1]}")
    return cosine_similarity(image_global, sentence, dim=-1, eps=eps)


# ------------------------ 批内 B×B 得分矩阵 ------------------------
# 约定：第 i 行第 j 列 = score(图像 i, 文本 j)，对角线为正样本

def local_score_matrix(
    regions: torch.Tensor,
    words: torch.Tensor,
    mask: torch.Tensor,
    gamma1: float = 4.0,
    gamma2: float = 5.0,
) -> torch.Tensor:
    """regions (B_img, D, R)，words (B_txt, D, T)，mask (B_txt, T) -> (B_img, B_txt)"""
    return local_matching_score(
        regions.unsqueeze(1),
        words.unsqueeze(0),
        gamma1=gamma1,
        gamma2=gamma2,
        mask=mask.unsqueeze(0),
    )


def global_score_matrix(image_global: torch.Tensor, sentence: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """image_global (B_img, D)，sentence (B_txt, D) -> (B_img, B_txt)"""
    if image_global.shape[-1] != sentence.shape[-1]:
        raise ShapeError(f"feature width mismatch: {image_global.shape[-1]} vs {sentence.shape[-1]}")
    return cosine_matrix(image_global, sentence, eps=eps)
