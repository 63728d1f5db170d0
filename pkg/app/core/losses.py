#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
训练目标

VLM：三个匹配层级各自的双向三元组损失之和。
VVM：生成图与真实图之间的全局/局部 InfoNCE 以及 MSB 得分差。
对抗：各阶段生成器与判别器损失（条件 + 非条件两个头）。
"""

from typing import Dict, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

from app.core.exceptions import NumericError, ShapeError
from app.core.numerics import cosine_matrix, cosine_similarity, logsumexp

# log 内概率的截断窗口
PROB_CLAMP = 1e-7

LEVELS = ("local", "global", "general")


def triplet_level_loss(scores: torch.Tensor, margin: float = 0.2, hardest_negative: bool = False) -> torch.Tensor:
    """
    双向 hinge 三元组损失

    scores[i, j] = score(图像 i, 文本 j)，对角线为正样本。
    图像->文本：[α + s(i, j) − s(i, i)]₊，文本->图像：[α + s(i, j) − s(j, j)]₊。
    每个方向对 B(B−1) 项取平均后两方向相加；hardest_negative 时每个锚点只取最难负样本，再对 B 个锚点平均。
    """
    if scores.dim() != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"score matrix must be square, got {tuple(scores.shape)}")
    b = scores.shape[0]
    if b < 2:
        raise ShapeError(f"triplet loss needs at least 2 pairs in the batch, got {b}")
    diagonal = scores.diag().view(b, 1)
    d1 = diagonal.expand_as(scores)
    d2 = diagonal.t().expand_as(scores)

    # 以图像 i 为锚点，同一行的其他文本为负样本
    cost_txt = (margin + scores - d1).clamp(min=0)
    # 以文本 j 为锚点，同一列的其他图像为负样本
    cost_img = (margin + scores - d2).clamp(min=0)

    eye = torch.eye(b, dtype=torch.bool, device=scores.device)
    cost_txt = cost_txt.masked_fill(eye, 0.0)
    cost_img = cost_img.masked_fill(eye, 0.0)

    if hardest_negative:
        return cost_txt.max(dim=1)[0].mean() + cost_img.max(dim=0)[0].mean()
    n_terms = b * (b - 1)
    return cost_txt.sum() / n_terms + cost_img.sum() / n_terms


def vlm_loss(
    matrices: Mapping[str, torch.Tensor],
    margin: float = 0.2,
    hardest_negative: bool = False,
    levels: Sequence[str] = LEVELS,
) -> Dict[str, torch.Tensor]:
    """
    L_VLM = L_local + L_global + L_general

    只累加 levels 中列出的层级（消融），返回 {"L_local", "L_global", "L_general", "L_VLM"} 中实际计算的项。
    """
    out: Dict[str, torch.Tensor] = {}
    total = None
    for level in LEVELS:
        if level not in levels:
            continue
        if level not in matrices:
            raise ShapeError(f"missing {level} score matrix")
        value = triplet_level_loss(matrices[level], margin, hardest_negative)
        out[f"L_{level}"] = value
        total = value if total is None else total + value
    if total is None:
        raise ShapeError("vlm_loss needs at least one matching level")
    out["L_VLM"] = total
    return out


def info_nce(similarity: torch.Tensor, tau0: float = 0.07) -> torch.Tensor:
    """
    对称 InfoNCE

    similarity[i, j] = sim(真实 i, 生成 j)；行方向（真实找生成）与列方向（生成找真实）的交叉熵各自对 B 平均后相加。
    """
    if similarity.dim() != 2 or similarity.shape[0] != similarity.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {tuple(similarity.shape)}")
    logits = similarity / tau0
    labels = torch.arange(similarity.shape[0], device=similarity.device)
    return F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels)


def region_set_similarity(real_regions: torch.Tensor, fake_regions: torch.Tensor, gamma3: float = 5.0) -> torch.Tensor:
    """
    两组区域特征之间的图像级相似度矩阵

    (B, D, R) × (B, D, R) -> (B, B)，S(i, j) = (1/γ₃)·log Σ_r exp(γ₃·cos(ϕ_r^real_i, ϕ_r^fake_j))，区域按下标对齐。
    """
    if real_regions.shape[1:] != fake_regions.shape[1:]:
        raise ShapeError(f"region features differ: real {tuple(real_regions.shape[1:])}, fake {tuple(fake_regions.shape[1:])}")
    # --> (B, B, R)
    cos = cosine_similarity(real_regions.unsqueeze(1), fake_regions.unsqueeze(0), dim=-2)
    return logsumexp(cos, gamma=gamma3, dim=-1)


def vvm_global_loss(real_global: torch.Tensor, fake_global: torch.Tensor, tau0: float = 0.07) -> torch.Tensor:
    """L_VG：真实/生成图全局特征按下标配对的对称 InfoNCE"""
    if real_global.shape != fake_global.shape:
        raise ShapeError(f"global features differ: {tuple(real_global.shape)} vs {tuple(fake_global.shape)}")
    return info_nce(cosine_matrix(real_global, fake_global), tau0)


def vvm_local_loss(real_regions: torch.Tensor, fake_regions: torch.Tensor,
                   tau0: float = 0.07, gamma3: float = 5.0) -> torch.Tensor:
    """L_VL：区域 LogSumExp 相似度上的对称 InfoNCE"""
    return info_nce(region_set_similarity(real_regions, fake_regions, gamma3), tau0)


def vvm_general_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """L_VGEN：同一描述下真实图与生成图 MSB 得分差的平方，对批平均"""
    if real_scores.shape != fake_scores.shape:
        raise ShapeError(f"score vectors differ: {tuple(real_scores.shape)} vs {tuple(fake_scores.shape)}")
    return (real_scores - fake_scores).pow(2).mean()


def _log_prob(p: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(p).all() or p.min().item() < 0.0 or p.max().item() > 1.0:
        raise NumericError("discriminator output is not a probability in [0, 1]")
    return torch.log(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))


def _log_one_minus(p: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(p).all() or p.min().item() < 0.0 or p.max().item() > 1.0:
        raise NumericError("discriminator output is not a probability in [0, 1]")
    return torch.log(1.0 - p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))


def generator_adv_loss(fake_uncond: torch.Tensor, fake_cond: torch.Tensor) -> torch.Tensor:
    """L_Gi = −½E[log D(x̂)] − ½E[log D(x̂, φ̄)]"""
    return -0.5 * _log_prob(fake_uncond).mean() - 0.5 * _log_prob(fake_cond).mean()


def discriminator_loss(
    real_uncond: torch.Tensor,
    fake_uncond: torch.Tensor,
    real_cond: torch.Tensor,
    fake_cond: torch.Tensor,
) -> torch.Tensor:
    """L_Di = −½[log D(x)] −½[log(1−D(x̂))] −½[log D(x,φ̄)] −½[log(1−D(x̂,φ̄))]，对批平均"""
    return -0.5 * (
        _log_prob(real_uncond).mean()
        + _log_one_minus(fake_uncond).mean()
        + _log_prob(real_cond).mean()
        + _log_one_minus(fake_cond).mean()
    )


def total_generator_loss(
    stage_losses: Sequence[torch.Tensor],
    vvm: Optional[torch.Tensor] = None,
    vlm: Optional[torch.Tensor] = None,
    lambda1: float = 5.0,
    lambda2: float = 5.0,
    kl: Optional[torch.Tensor] = None,
    beta_kl: float = 0.0,
) -> torch.Tensor:
    """L_G = Σ L_Gi + λ₁·L_VVM + λ₂·L_VLM (+ β·kl)；缺省的项视为 0"""
    if not stage_losses:
        raise ShapeError("total_generator_loss needs at least one stage loss")
    total = stage_losses[0]
    for loss in stage_losses[1:]:
        total = total + loss
    if vvm is not None and lambda1 != 0:
        total = total + lambda1 * vvm
    if vlm is not None and lambda2 != 0:
        total = total + lambda2 * vlm
    if kl is not None and beta_kl != 0:
        total = total + beta_kl * kl
    return total
