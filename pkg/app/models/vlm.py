#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
视觉-语言匹配模型 VLM = 文本编码器 + 视觉编码器 + MSB
"""

from dataclasses import dataclass
from typing import Dict, Sequence

import torch
import torch.nn as nn

from app.core.matching import global_matching_score, global_score_matrix, local_matching_score, local_score_matrix
from app.data.vocab import Caption
from app.models.encoders import ImageFeatures, TextEncoder, TextFeatures, VisionEncoder
from app.models.msb import MatchingScoringBlock
from app.schemas.train_config import TrainConfig


@dataclass
class MatchScores:
    """逐对的三级匹配得分，均为 (B,)"""
    local: torch.Tensor
    global_: torch.Tensor
    general: torch.Tensor


class VisionLanguageMatcher(nn.Module):
    def __init__(self, vocab_size: int, config: TrainConfig, pad_id: int = 0):
        super().__init__()
        self.gamma1 = config.gamma1
        self.gamma2 = config.gamma2
        self.t_max = config.t_max
        self.text_encoder = TextEncoder(
            vocab_size,
            embed_dim=config.embed_dim,
            word_dim=config.word_embedding_dim,
            drop_prob=config.text_dropout,
            pad_id=pad_id,
        )
        self.vision_encoder = VisionEncoder(
            image_size=config.image_size,
            embed_dim=config.embed_dim,
            width=config.vision_width,
        )
        self.msb = MatchingScoringBlock(
            embed_dim=config.embed_dim,
            num_layers=config.msb_layers,
            num_heads=config.msb_heads,
            dropout=config.msb_dropout,
        )

    @property
    def embed_dim(self) -> int:
        return self.text_encoder.embed_dim

    @property
    def num_regions(self) -> int:
        return self.vision_encoder.num_regions

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def encode_text(self, ids: torch.Tensor, lengths: torch.Tensor) -> TextFeatures:
        return self.text_encoder(ids.to(self.device), lengths.to(self.device))

    def encode_captions(self, captions: Sequence[Caption]) -> TextFeatures:
        ids = torch.tensor([c.ids for c in captions], dtype=torch.long)
        lengths = torch.tensor([c.length for c in captions], dtype=torch.long)
        return self.encode_text(ids, lengths)

    def encode_image(self, images: torch.Tensor) -> ImageFeatures:
        dtype = next(self.parameters()).dtype
        return self.vision_encoder(images.to(self.device, dtype))

    def scores(self, text: TextFeatures, image: ImageFeatures) -> MatchScores:
        """逐对打分：text 与 image 的第 b 项配对"""
        return MatchScores(
            local=local_matching_score(image.regions, text.words, self.gamma1, self.gamma2, text.mask),
            global_=global_matching_score(image.global_, text.sentence),
            general=self.msb(text, image),
        )

    def score_matrices(self, text: TextFeatures, image: ImageFeatures,
                       levels: Sequence[str] = ("local", "global", "general")) -> Dict[str, torch.Tensor]:
        """批内三级得分矩阵，(B_img, B_txt)；只计算 levels 中列出的层级"""
        out: Dict[str, torch.Tensor] = {}
        if "local" in levels:
            out["local"] = local_score_matrix(image.regions, text.words, text.mask, self.gamma1, self.gamma2)
        if "global" in levels:
            out["global"] = global_score_matrix(image.global_, text.sentence)
        if "general" in levels:
            out["general"] = self.msb.score_matrix(text, image)
        return out

    def freeze(self) -> "VisionLanguageMatcher":
        """切到评估模式并关闭所有参数的梯度"""
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self
