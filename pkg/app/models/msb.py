#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
匹配打分模块 MSB（general 级匹配）

ψ = cat(φ, φ̄, ϕ, ϕ̄) 组成长度 T+R+2 的 token 序列，加上 4 种模态类型嵌入后
送入自注意力编码器，经 W₀ 仿射、有效 token 平均池化、W₁ 仿射到标量，最后 sigmoid。
"""

from typing import Optional

import torch
import torch.nn as nn

from app.core.exceptions import ShapeError
from app.models.encoders import ImageFeatures, TextFeatures

# token 类型编号，顺序即拼接顺序
WORD, SENTENCE, REGION, GLOBAL = range(4)

# sigmoid 之前的 logit 截断，保证 float32 下输出严格落在 (0, 1)
LOGIT_CLAMP = 15.0


class MatchingScoringBlock(nn.Module):
    def __init__(self, embed_dim: int = 64, num_layers: int = 1, num_heads: int = 4,
                 dropout: float = 0.0, ff_mult: int = 4):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ShapeError(f"embed_dim {embed_dim} not divisible by num_heads {num_heads}")
        self.embed_dim = embed_dim
        self.type_embed = nn.Embedding(4, embed_dim)
        self.encoder = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(
                d_model=embed_dim,
                nhead=num_heads,
                dim_feedforward=embed_dim * ff_mult,
                dropout=dropout,
                batch_first=True,
            ),
            num_layers=num_layers,
            enable_nested_tensor=False,
        )
        self.proj = nn.Linear(embed_dim, embed_dim)  # (W₀, b₀)
        self.head = nn.Linear(embed_dim, 1)          # (W₁, b₁)
        nn.init.normal_(self.type_embed.weight, std=0.02)

    def _tokens(self, words, sentence, regions, global_, mask):
        b, d, t = words.shape
        r = regions.shape[2]
        for name, width in (("sentence", sentence.shape[-1]), ("regions", regions.shape[1]),
                            ("global", global_.shape[-1])):
            if width != d:
                raise ShapeError(f"MSB width mismatch: words D={d}, {name} D={width}")
        if d != self.embed_dim:
            raise ShapeError(f"MSB expects D={self.embed_dim}, got {d}")
        # --> B×(T+1+R+1)×D
        tokens = torch.cat([
            words.transpose(1, 2),
            sentence.unsqueeze(1),
            regions.transpose(1, 2),
            global_.unsqueeze(1),
        ], dim=1)
        types = torch.cat([
            torch.full((t,), WORD, dtype=torch.long),
            torch.tensor([SENTENCE]),
            torch.full((r,), REGION, dtype=torch.long),
            torch.tensor([GLOBAL]),
        ]).to(tokens.device)
        tokens = tokens + self.type_embed(types).to(tokens.dtype).unsqueeze(0)
        valid = torch.cat([mask.to(torch.bool), torch.ones(b, r + 2, dtype=torch.bool, device=mask.device)], dim=1)
        return tokens, valid

    def logits(self, words: torch.Tensor, sentence: torch.Tensor, regions: torch.Tensor,
               global_: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = torch.ones(words.shape[0], words.shape[2], dtype=torch.bool, device=words.device)
        tokens, valid = self._tokens(words, sentence, regions, global_, mask)
        hidden = self.proj(self.encoder(tokens, src_key_padding_mask=~valid))
        # 只对有效 token 求平均
        pooled = hidden.masked_fill(~valid.unsqueeze(-1), 0.0).sum(dim=1) / valid.sum(dim=1, keepdim=True)
        return self.head(pooled).squeeze(-1)

    def forward(self, text: TextFeatures, image: ImageFeatures) -> torch.Tensor:
        """逐对打分，text 与 image 的第 b 项配对，返回 (B,)，取值 (0, 1)"""
        if text.words.shape[0] != image.regions.shape[0]:
            raise ShapeError(f"batch mismatch: {text.words.shape[0]} captions vs {image.regions.shape[0]} images")
        logit = self.logits(text.words, text.sentence, image.regions, image.global_, text.mask)
        return torch.sigmoid(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))

    def score_matrix(self, text: TextFeatures, image: ImageFeatures) -> torch.Tensor:
        """所有图文组合的得分，(B_img, B_txt)，第 i 行第 j 列 = score(图像 i, 文本 j)"""
        n_img, n_txt = image.regions.shape[0], text.words.shape[0]
        img_idx = torch.arange(n_img, device=image.regions.device).repeat_interleave(n_txt)
        txt_idx = torch.arange(n_txt, device=text.words.device).repeat(n_img)
        scores = self.forward(text[txt_idx], image[img_idx])
        return scores.view(n_img, n_txt)
