#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
词表与分词

小写、去标点、按空白切分；保留 <pad>=0 与 <unk>=1 两个特殊 id。
词表按 (词频降序, 字典序) 排列，相同词多重集一定得到相同词表。
"""

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from app.core.exceptions import DataError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN)
DEFAULT_T_MAX = 16

_PUNCT = re.compile(r"[^\w\s]")


def split_words(text: str) -> List[str]:
    """小写、去标点后按空白切分"""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    pad_id: int = 0
    unk_id: int = 1

    def __post_init__(self):
        if tuple(self.tokens[:2]) != RESERVED_TOKENS:
            raise DataError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    @cached_property
    def token_to_id(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    @property
    def id_to_token(self) -> Dict[int, str]:
        return dict(enumerate(self.tokens))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def digest(self) -> str:
        """词表哈希，写入检查点 manifest 用于一致性校验"""
        return hashlib.sha1("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def save(self, path: Union[str, Path]) -> Path:
        """vocab.txt：每行一个非保留词，行号 + 保留词数 = id"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "".join(f"{t}\n" for t in self.tokens[len(RESERVED_TOKENS):])
        path.write_text(body, encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocabulary file not found: {path}")
        words = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls(tokens=RESERVED_TOKENS + tuple(words))


@dataclass(frozen=True)
class Caption:
    """分词后的描述：ids 长度为 T_max，length 之后的位置全是 pad"""
    ids: Tuple[int, ...]
    length: int
    raw: str = field(default="", compare=False)

    @property
    def token_ids(self) -> Tuple[int, ...]:
        return self.ids[:self.length]

    @property
    def t_max(self) -> int:
        return len(self.ids)


def build_vocab(corpus) -> Vocabulary:
    """
    由数据集或文本序列构建词表

    corpus 可以是 CaptionedImageDataset（遍历全部描述）或任意字符串可迭代对象。
    """
    texts: Iterable[str] = corpus.iter_captions() if hasattr(corpus, "iter_captions") else corpus
    counts: Counter = Counter()
    n = 0
    for text in texts:
        counts.update(split_words(text))
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tokens=RESERVED_TOKENS + tuple(t for t, _ in ordered))


def caption_from_ids(ids: Sequence[int], vocab: Vocabulary, t_max: int = DEFAULT_T_MAX, raw: str = "") -> Caption:
    """由 id 序列（不含 pad）构造定长 Caption，空序列替换为单个 unk"""
    ids = list(ids)[:t_max] or [vocab.unk_id]
    for i in ids:
        if not 0 <= i < vocab.size:
            raise DataError(f"token id {i} outside vocabulary of size {vocab.size}")
    padded = tuple(ids) + (vocab.pad_id,) * (t_max - len(ids))
    return Caption(ids=padded, length=len(ids), raw=raw)


def tokenize(text: str, vocab: Vocabulary, t_max: int = DEFAULT_T_MAX, strict: bool = False) -> Caption:
    """
    文本 -> Caption

    超过 T_max 截断；未登录词映射为 unk，strict=True 时直接报错。
    """
    words = split_words(text or "")
    if not words:
        raise DataError(f"caption is empty after cleanup: {text!r}")
    ids = []
    for w in words[:t_max]:
        idx = vocab.token_to_id.get(w)
        if idx is None:
            if strict:
                raise DataError(f"token {w!r} is not in the vocabulary")
            idx = vocab.unk_id
        ids.append(idx)
    return caption_from_ids(ids, vocab, t_max, raw=text)


def detokenize(caption: Caption, vocab: Vocabulary) -> List[str]:
    return [vocab.tokens[i] for i in caption.token_ids]
