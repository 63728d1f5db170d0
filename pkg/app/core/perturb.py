#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
VLMS 验证用的扰动：图像加白噪声、描述掩码
"""

import math
from typing import Optional

import numpy as np
import torch

from app.core.exceptions import ConfigurationError, DataError
from app.data.vocab import Caption, Vocabulary, caption_from_ids

STOPWORDS = frozenset({"and", "this", "a", "an", "there", "of"})

MASK_MODES = ("fraction", "replace", "stopwords")


def perturb_image(image: torch.Tensor, sigma: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """加 N(0, σ²) 逐像素噪声后截断回 [-1, 1]；σ=0 原样返回副本"""
    if sigma < 0:
        raise ConfigurationError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.clone()
    noise = torch.randn(image.shape, generator=generator, dtype=image.dtype).to(image.device)
    return (image + sigma * noise).clamp(-1.0, 1.0)


def masked_count(length: int, p: float) -> int:
    """⌈p·T₀⌉，先舍入掉浮点误差（0.7·10 不应变成 8）"""
    return min(length, math.ceil(round(p * length, 9)))


def mask_words(
    caption: Caption,
    vocab: Vocabulary,
    mode: str = "fraction",
    p: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Caption:
    """
    描述掩码

    fraction：均匀随机删除 ⌈p·T₀⌉ 个词；replace：同样的位置改为 unk；
    stopwords：删除停用词表中的词。结果重新补齐，删空时替换为单个 unk。
    """
    if mode not in MASK_MODES:
        raise ConfigurationError(f"unknown mask mode {mode!r}, expected one of {MASK_MODES}")
    ids = list(caption.token_ids)
    if mode == "stopwords":
        kept = [i for i in ids if vocab.tokens[i] not in STOPWORDS]
        return caption_from_ids(kept, vocab, caption.t_max, raw=caption.raw)

    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"mask fraction must lie in [0, 1], got {p}")
    k = masked_count(len(ids), p)
    if k == 0:
        return caption
    rng = rng if rng is not None else np.random.default_rng()
    chosen = set(int(i) for i in rng.choice(len(ids), size=k, replace=False))
    if mode == "replace":
        kept = [vocab.unk_id if pos in chosen else i for pos, i in enumerate(ids)]
    else:
        kept = [i for pos, i in enumerate(ids) if pos not in chosen]
    return caption_from_ids(kept, vocab, caption.t_max, raw=caption.raw)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """随机重配对：随机排列上循环移一位，partner[i] != i"""
    if n < 2:
        raise DataError("random re-pairing needs at least 2 images")
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner
