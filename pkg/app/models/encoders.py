#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
文本编码器与视觉编码器

文本：词嵌入 + 双向 LSTM，两个方向逐位置相加得到词特征 φ (D×T)，
      两个方向最后隐状态拼接后线性投影得到句特征 φ̄ (D)。
视觉：4 个步长为 2 的卷积块，第 4 块输出网格经 1×1 卷积得到局部特征 ϕ (D×R)，
      再经一个卷积层做全局平均池化后线性投影得到全局特征 ϕ̄ (D)。
"""

from dataclasses import dataclass

import math

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from app.core.exceptions import DataError, ShapeError

N_GROUPS = 4


@dataclass
class TextFeatures:
    words: torch.Tensor      # B×D×T_max，pad 位置为 0
    sentence: torch.Tensor   # B×D
    mask: torch.Tensor       # B×T_max，有效词为 True

    def __getitem__(self, idx) -> "TextFeatures":
        return TextFeatures(self.words[idx], self.sentence[idx], self.mask[idx])

    def detach(self) -> "TextFeatures":
        return TextFeatures(self.words.detach(), self.sentence.detach(), self.mask)


@dataclass
class ImageFeatures:
    regions: torch.Tensor    # B×D×R
    global_: torch.Tensor    # B×D

    def __getitem__(self, idx) -> "ImageFeatures":
        return ImageFeatures(self.regions[idx], self.global_[idx])

    def detach(self) -> "ImageFeatures":
        return ImageFeatures(self.regions.detach(), self.global_.detach())


def conv1x1(in_planes, out_planes, bias=True):
    "1x1 convolution"
    return nn.Conv2d(in_planes, out_planes, kernel_size=1, stride=1, padding=0, bias=bias)


def down_block(in_planes, out_planes):
    """空间尺寸减半"""
    return nn.Sequential(
        nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=2, padding=1, bias=False),
        nn.GroupNorm(math.gcd(N_GROUPS, out_planes), out_planes),
        nn.LeakyReLU(0.2, inplace=False),
    )


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int = 64, word_dim: int = 64,
                 drop_prob: float = 0.0, pad_id: int = 0):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.pad_id = pad_id
        self.encoder = nn.Embedding(vocab_size, word_dim, padding_idx=pad_id)
        self.drop = nn.Dropout(drop_prob)
        self.rnn = nn.LSTM(word_dim, embed_dim, num_layers=1, batch_first=True, bidirectional=True)
        self.sent_proj = nn.Linear(2 * embed_dim, embed_dim)
        self.init_weights()

    def init_weights(self):
        initrange = 0.1
        self.encoder.weight.data.uniform_(-initrange, initrange)
        self.encoder.weight.data[self.pad_id].zero_()

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> TextFeatures:
        """
        ids: B×T_max (long)，lengths: B

        pack 之后 pad 位置不进入 LSTM，因此修改 pad 嵌入不会影响任何输出。
        """
        if ids.dim() != 2:
            raise ShapeError(f"expected B×T token ids, got shape {tuple(ids.shape)}")
        if lengths.min().item() < 1:
            raise DataError("every caption needs at least one token")
        if ids.min().item() < 0 or ids.max().item() >= self.vocab_size:
            raise DataError(f"token id outside vocabulary range [0, {self.vocab_size})")
        t_max = ids.shape[1]
        emb = self.drop(self.encoder(ids))
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        output, (hidden, _) = self.rnn(packed)
        # --> B×T_max×2D
        output = pad_packed_sequence(output, batch_first=True, total_length=t_max)[0]
        d = self.embed_dim
        # 两个方向逐位置相加 --> B×D×T_max
        words = (output[..., :d] + output[..., d:]).transpose(1, 2).contiguous()
        # hidden: 2×B×D --> B×2D
        sentence = self.sent_proj(torch.cat([hidden[0], hidden[1]], dim=1))
        positions = torch.arange(t_max, device=ids.device)
        mask = positions.unsqueeze(0) < lengths.to(ids.device).unsqueeze(1)
        return TextFeatures(words=words, sentence=sentence, mask=mask)


class VisionEncoder(nn.Module):
    def __init__(self, image_size: int = 64, embed_dim: int = 64, width: int = 32):
        super().__init__()
        if image_size % 16 != 0:
            raise ShapeError(f"image_size must be divisible by 16, got {image_size}")
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.grid = image_size // 16
        self.backbone = nn.Sequential(
            down_block(3, width),
            down_block(width, width * 2),
            down_block(width * 2, width * 4),
            down_block(width * 4, width * 8),
        )
        self.tail = nn.Sequential(
            nn.Conv2d(width * 8, width * 8, kernel_size=3, stride=1, padding=1, bias=False),
            nn.GroupNorm(math.gcd(N_GROUPS, width * 8), width * 8),
            nn.LeakyReLU(0.2, inplace=False),
        )
        # 新增的投影层：ϕ = F_1x1(f)，ϕ̄ = W f̄ + b
        self.emb_features = conv1x1(width * 8, embed_dim)
        self.emb_cnn_code = nn.Linear(width * 8, embed_dim)

    @property
    def num_regions(self) -> int:
        return self.grid * self.grid

    def forward(self, images: torch.Tensor) -> ImageFeatures:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected B×3×H×W images, got shape {tuple(images.shape)}")
        if images.shape[2] != self.image_size or images.shape[3] != self.image_size:
            raise ShapeError(f"expected {self.image_size}×{self.image_size} images, got {images.shape[2]}×{images.shape[3]}")
        features = self.backbone(images)
        # --> B×D×R
        regions = self.emb_features(features).flatten(2)
        pooled = self.tail(features).mean(dim=(2, 3))
        return ImageFeatures(regions=regions, global_=self.emb_cnn_code(pooled))
