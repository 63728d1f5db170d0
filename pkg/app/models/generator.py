#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
多阶段注意力条件生成器与各阶段判别器

条件增强 CA -> 初始阶段 F₀ -> (词注意力 + 残差块 + 2× 上采样) × (阶段数 − 1)，
每个阶段都有 3×3 卷积 + tanh 的图像头。归一化统一用 GroupNorm，不依赖批统计量。
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from app.core.exceptions import ShapeError
from app.core.numerics import gaussian_kl_diag, masked_softmax
from app.schemas.train_config import TrainConfig

N_GROUPS = 4


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(N_GROUPS, channels), channels)


class GLU(nn.Module):
    def forward(self, x):
        nc = x.size(1)
        if nc % 2 != 0:
            raise ShapeError(f"GLU needs an even channel count, got {nc}")
        nc = nc // 2
        return x[:, :nc] * torch.sigmoid(x[:, nc:])


def conv1x1(in_planes, out_planes, bias=False):
    "1x1 convolution"
    return nn.Conv2d(in_planes, out_planes, kernel_size=1, stride=1, padding=0, bias=bias)


def conv3x3(in_planes, out_planes):
    "3x3 convolution with padding"
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=1, padding=1, bias=False)


# 空间尺寸 ×2
def up_block(in_planes, out_planes):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        conv3x3(in_planes, out_planes * 2),
        _norm(out_planes * 2),
        GLU(),
    )


class ResBlock(nn.Module):
    def __init__(self, channel_num):
        super().__init__()
        self.block = nn.Sequential(
            conv3x3(channel_num, channel_num * 2),
            _norm(channel_num * 2),
            GLU(),
            conv3x3(channel_num, channel_num),
            _norm(channel_num),
        )

    def forward(self, x):
        return self.block(x) + x


# ------------------------ 条件增强 ------------------------
@dataclass
class ConditionVector:
    c: torch.Tensor        # B×D_c
    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def kl(self) -> torch.Tensor:
        """逐样本 KL(N(μ, σ²) ‖ N(0, I))，(B,)"""
        return gaussian_kl_diag(self.mu, self.logvar)


class ConditioningAugmentation(nn.Module):
    def __init__(self, embed_dim: int, condition_dim: int):
        super().__init__()
        self.condition_dim = condition_dim
        self.fc = nn.Linear(embed_dim, condition_dim * 4, bias=True)
        self.glu = GLU()

    def encode(self, sentence: torch.Tensor):
        x = self.glu(self.fc(sentence))
        return x[:, :self.condition_dim], x[:, self.condition_dim:]

    def forward(self, sentence: torch.Tensor, eps: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> ConditionVector:
        """c = μ + exp(½·logσ²)⊙ε；未给出 ε 时从 generator 采样"""
        mu, logvar = self.encode(sentence)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype).to(mu.device)
        elif eps.shape != mu.shape:
            raise ShapeError(f"eps shape {tuple(eps.shape)} does not match condition shape {tuple(mu.shape)}")
        std = torch.exp(0.5 * logvar)
        return ConditionVector(c=mu + std * eps, mu=mu, logvar=logvar)


# ------------------------ 生成阶段 ------------------------
class InitStage(nn.Module):
    """h₀ = F₀(cat(z, c))：线性映射到 4×4 网格后逐次上采样到 base_size"""

    def __init__(self, in_dim: int, ngf: int, base_size: int):
        super().__init__()
        n_up = int(math.log2(base_size // 4))
        if 4 * 2 ** n_up != base_size:
            raise ShapeError(f"base_size must be 4 * 2^k, got {base_size}")
        self.start_dim = ngf * 2 ** n_up
        self.fc = nn.Linear(in_dim, self.start_dim * 4 * 4 * 2, bias=False)
        self.fc_norm = _norm(self.start_dim * 2)
        self.glu = GLU()
        self.upsample = nn.Sequential(*[
            up_block(self.start_dim // 2 ** i, self.start_dim // 2 ** (i + 1)) for i in range(n_up)
        ])

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        in_code = torch.cat([z, c], dim=1)
        out_code = self.fc(in_code).view(-1, self.start_dim * 2, 4, 4)
        out_code = self.glu(self.fc_norm(out_code))
        return self.upsample(out_code)


class WordAttention(nn.Module):
    """
    词-视觉融合上下文

    每个网格单元 j 对词做 softmax(h_jᵀ·W φ_i)，屏蔽词权重为 0，输出与 h 同形的上下文网格。
    """

    def __init__(self, idf: int, cdf: int):
        super().__init__()
        self.conv_context = conv1x1(cdf, idf)

    def project(self, words: torch.Tensor) -> torch.Tensor:
        """B×D×T --> B×D̂×T"""
        return self.conv_context(words.unsqueeze(3)).squeeze(3)

    def forward(self, h: torch.Tensor, words: torch.Tensor, mask: Optional[torch.Tensor] = None):
        b, idf, ih, iw = h.shape
        if words.shape[0] != b:
            raise ShapeError(f"batch mismatch: grid {b} vs words {words.shape[0]}")
        if mask is not None and not mask.to(torch.bool).any(dim=1).all():
            raise ShapeError("every caption needs at least one unmasked word")
        query_len = ih * iw
        source = self.project(words)
        # --> B×N×D̂
        target = h.view(b, idf, query_len).transpose(1, 2)
        # --> B×N×T
        attn = torch.bmm(target, source)
        attn = masked_softmax(attn, dim=-1, mask=None if mask is None else mask.unsqueeze(1))
        # (B×D̂×T)(B×T×N) --> B×D̂×N
        context = torch.bmm(source, attn.transpose(1, 2))
        return context.view(b, idf, ih, iw), attn.transpose(1, 2).reshape(b, -1, ih, iw)


class RefineStage(nn.Module):
    """h_i = F_i(h_{i−1}, F_attn(h_{i−1}, φ))"""

    def __init__(self, ngf: int, embed_dim: int, num_residual: int = 2):
        super().__init__()
        self.ngf = ngf
        self.att = WordAttention(ngf, embed_dim)
        self.residual = nn.Sequential(*[ResBlock(ngf * 2) for _ in range(num_residual)])
        self.upsample = up_block(ngf * 2, ngf)

    def forward(self, h: torch.Tensor, words: torch.Tensor, mask: Optional[torch.Tensor] = None):
        if h.shape[1] != self.ngf:
            raise ShapeError(f"refine stage expects {self.ngf} channels, got {h.shape[1]}")
        context, attn = self.att(h, words, mask)
        out_code = self.residual(torch.cat([h, context], dim=1))
        return self.upsample(out_code), attn


class ImageHead(nn.Module):
    """x̂_i = G_i(h_i)：3×3 卷积 + tanh"""

    def __init__(self, ngf: int):
        super().__init__()
        self.img = nn.Sequential(conv3x3(ngf, 3), nn.Tanh())

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.img(h)


@dataclass
class GeneratorOutput:
    images: List[torch.Tensor]
    hiddens: List[torch.Tensor]
    attention: List[torch.Tensor] = field(default_factory=list)
    condition: Optional[ConditionVector] = None


class AttentiveGenerator(nn.Module):
    def __init__(self, embed_dim: int = 64, z_dim: int = 32, condition_dim: int = 32,
                 ngf: int = 32, base_size: int = 16, num_stages: int = 3, num_residual: int = 2):
        super().__init__()
        self.z_dim = z_dim
        self.base_size = base_size
        self.num_stages = num_stages
        self.ca = ConditioningAugmentation(embed_dim, condition_dim)
        self.init_stage = InitStage(z_dim + condition_dim, ngf, base_size)
        self.refine_stages = nn.ModuleList([
            RefineStage(ngf, embed_dim, num_residual) for _ in range(num_stages - 1)
        ])
        self.image_heads = nn.ModuleList([ImageHead(ngf) for _ in range(num_stages)])

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AttentiveGenerator":
        return cls(
            embed_dim=config.embed_dim,
            z_dim=config.z_dim,
            condition_dim=config.condition_dim,
            ngf=config.gen_width,
            base_size=config.base_size,
            num_stages=config.num_stages,
            num_residual=config.residual_blocks,
        )

    @property
    def stage_sizes(self) -> Sequence[int]:
        return tuple(self.base_size * 2 ** i for i in range(self.num_stages))

    def refine(self, h: torch.Tensor, words: torch.Tensor, mask: Optional[torch.Tensor], stage_index: int):
        if not 1 <= stage_index < self.num_stages:
            raise ShapeError(f"stage_index must be in [1, {self.num_stages - 1}], got {stage_index}")
        return self.refine_stages[stage_index - 1](h, words, mask)

    def to_image(self, h: torch.Tensor, stage_index: int) -> torch.Tensor:
        return self.image_heads[stage_index](h)

    def forward(self, z: torch.Tensor, sentence: torch.Tensor, words: torch.Tensor,
                mask: Optional[torch.Tensor] = None, eps: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> GeneratorOutput:
        if z.shape[-1] != self.z_dim:
            raise ShapeError(f"noise width {z.shape[-1]} does not match z_dim {self.z_dim}")
        condition = self.ca(sentence, eps=eps, generator=generator)
        h = self.init_stage(z, condition.c)
        hiddens, images, attention = [h], [self.to_image(h, 0)], []
        for i in range(1, self.num_stages):
            h, attn = self.refine(h, words, mask, i)
            hiddens.append(h)
            images.append(self.to_image(h, i))
            attention.append(attn)
        return GeneratorOutput(images=images, hiddens=hiddens, attention=attention, condition=condition)


# ------------------------ 判别器 ------------------------
def down_block(in_planes, out_planes):
    """空间尺寸 ÷2"""
    return nn.Sequential(
        nn.Conv2d(in_planes, out_planes, 4, 2, 1, bias=False),
        _norm(out_planes),
        nn.LeakyReLU(0.2, inplace=False),
    )


def block3x3_leaky_relu(in_planes, out_planes):
    return nn.Sequential(
        conv3x3(in_planes, out_planes),
        _norm(out_planes),
        nn.LeakyReLU(0.2, inplace=False),
    )


class StageDiscriminator(nn.Module):
    """把 resolution×resolution 图像下采样到 4×4，非条件头与条件头各输出一个概率"""

    def __init__(self, resolution: int, embed_dim: int = 64, ndf: int = 32):
        super().__init__()
        n_down = int(math.log2(resolution // 4))
        if resolution < 8 or 4 * 2 ** n_down != resolution:
            raise ShapeError(f"discriminator resolution must be 4 * 2^k >= 8, got {resolution}")
        self.resolution = resolution
        self.embed_dim = embed_dim
        layers = [nn.Conv2d(3, ndf, 4, 2, 1, bias=False), nn.LeakyReLU(0.2, inplace=False)]
        channels = ndf
        for _ in range(n_down - 1):
            nxt = min(channels * 2, ndf * 8)
            layers.append(down_block(channels, nxt))
            channels = nxt
        self.img_code = nn.Sequential(*layers)
        self.channels = channels
        self.uncond_logits = nn.Conv2d(channels, 1, kernel_size=4, stride=4)
        self.joint_conv = block3x3_leaky_relu(channels + embed_dim, channels)
        self.cond_logits = nn.Conv2d(channels, 1, kernel_size=4, stride=4)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise ShapeError(f"discriminator expects B×3×{self.resolution}×{self.resolution}, got {tuple(x.shape)}")
        return self.img_code(x)

    def uncond(self, code: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.uncond_logits(code)).view(-1)

    def cond(self, code: torch.Tensor, sentence: torch.Tensor) -> torch.Tensor:
        if sentence.shape != (code.shape[0], self.embed_dim):
            raise ShapeError(f"condition must be B×{self.embed_dim}, got {tuple(sentence.shape)}")
        tiled = sentence.view(-1, self.embed_dim, 1, 1).repeat(1, 1, 4, 4)
        h_c_code = self.joint_conv(torch.cat([code, tiled], dim=1))
        return torch.sigmoid(self.cond_logits(h_c_code)).view(-1)

    def forward(self, x: torch.Tensor, sentence: Optional[torch.Tensor] = None):
        """返回 (p_uncond, p_cond)，未给 sentence 时 p_cond 为 None"""
        code = self.encode(x)
        p_cond = None if sentence is None else self.cond(code, sentence)
        return self.uncond(code), p_cond


def build_discriminators(config: TrainConfig) -> nn.ModuleList:
    return nn.ModuleList([
        StageDiscriminator(size, embed_dim=config.embed_dim, ndf=config.disc_width) for size in config.stage_sizes
    ])


def sample_noise(batch_size: int, z_dim: int, generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.randn((batch_size, z_dim), generator=generator, dtype=dtype)
