#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
图文配对数据集、批采样与磁盘格式

磁盘布局：
    <root>/images/<image_id>.png
    <root>/captions.tsv   image_id \\t caption，每条描述一行
    <root>/shapes.tsv     合成数据的形状元数据（可选）
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from app.core.exceptions import DataError, ShapeError
from app.data.vocab import DEFAULT_T_MAX, Caption, Vocabulary, tokenize
from app.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class ShapeInfo:
    """一个渲染形状的元数据，bbox 为闭区间 (x0, y0, x1, y1)"""
    kind: str
    color: str
    size: str
    position: str
    cx: int
    cy: int
    radius: int

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        r = self.radius
        return self.cx - r, self.cy - r, self.cx + r, self.cy + r


def pixels_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """uint8 H×W×3 -> float32 3×H×W，取值 [-1, 1]"""
    arr = np.asarray(pixels, dtype=np.float32).transpose(2, 0, 1)
    return torch.from_numpy(arr / 127.5 - 1.0)


def tensor_to_pixels(image: torch.Tensor) -> np.ndarray:
    """float 3×H×W（[-1, 1]）-> uint8 H×W×3，四舍五入"""
    arr = image.detach().to("cpu", torch.float64).clamp(-1.0, 1.0).numpy()
    arr = np.rint((arr + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


@dataclass(frozen=True, eq=False)
class PairedExample:
    image_id: str
    pixels: np.ndarray
    captions: Tuple[str, ...]
    shapes: Tuple[ShapeInfo, ...] = ()
    background: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ShapeError(f"{self.image_id}: expected uint8 H×W×3 pixels, got {self.pixels.dtype} {self.pixels.shape}")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ShapeError(f"{self.image_id}: image must be square, got {self.pixels.shape[:2]}")
        if not self.captions:
            raise DataError(f"{self.image_id}: at least one caption is required")
        self.pixels.setflags(write=False)

    @property
    def image(self) -> torch.Tensor:
        return pixels_to_tensor(self.pixels)

    @property
    def image_size(self) -> int:
        return int(self.pixels.shape[0])


class CaptionedImageDataset:
    """构造后不可变的图文数据集，可被多个 worker 并发读取"""

    def __init__(self, examples: Sequence[PairedExample], name: str = ""):
        self.examples: Tuple[PairedExample, ...] = tuple(examples)
        self.name = name
        if not self.examples:
            raise DataError("dataset must contain at least one example")
        ids = [ex.image_id for ex in self.examples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image_id in dataset")
        sizes = {ex.image_size for ex in self.examples}
        if len(sizes) != 1:
            raise ShapeError(f"mixed image sizes in dataset: {sorted(sizes)}")
        self._index = {image_id: i for i, image_id in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, idx: int) -> PairedExample:
        return self.examples[idx]

    def __iter__(self) -> Iterator[PairedExample]:
        return iter(self.examples)

    @property
    def image_size(self) -> int:
        return self.examples[0].image_size

    def index_of(self, image_id: str) -> int:
        if image_id not in self._index:
            raise DataError(f"unknown image_id {image_id!r}")
        return self._index[image_id]

    def get(self, image_id: str) -> PairedExample:
        return self.examples[self.index_of(image_id)]

    def iter_captions(self) -> Iterator[str]:
        for ex in self.examples:
            yield from ex.captions

    def caption_pool(self) -> List[Tuple[int, str]]:
        """(图片下标, 描述) 列表，按数据集顺序"""
        return [(i, c) for i, ex in enumerate(self.examples) for c in ex.captions]

    def images(self, indices: Optional[Sequence[int]] = None) -> torch.Tensor:
        indices = range(len(self)) if indices is None else indices
        return torch.stack([self.examples[i].image for i in indices])

    def merged(self, other: "CaptionedImageDataset", name: str = "") -> "CaptionedImageDataset":
        return CaptionedImageDataset(self.examples + other.examples, name=name or f"{self.name}+{other.name}")


@dataclass(frozen=True)
class Batch:
    images: torch.Tensor
    ids: torch.Tensor
    lengths: torch.Tensor
    image_ids: Tuple[str, ...]
    captions: Tuple[Caption, ...]

    @property
    def size(self) -> int:
        return int(self.images.shape[0])

    @property
    def mask(self) -> torch.Tensor:
        """B×T_max 有效词位置"""
        positions = torch.arange(self.ids.shape[1], device=self.lengths.device)
        return positions.unsqueeze(0) < self.lengths.unsqueeze(1)

    def to(self, device=None, dtype=None) -> "Batch":
        return Batch(
            images=self.images.to(device=device, dtype=dtype),
            ids=self.ids.to(device),
            lengths=self.lengths.to(device),
            image_ids=self.image_ids,
            captions=self.captions,
        )


def collate(images: Sequence[torch.Tensor], captions: Sequence[Caption], image_ids: Sequence[str]) -> Batch:
    if not (len(images) == len(captions) == len(image_ids)):
        raise DataError("images, captions and image_ids must have the same length")
    if len({c.t_max for c in captions}) != 1:
        raise ShapeError("captions in a batch must share T_max")
    return Batch(
        images=torch.stack(list(images)),
        ids=torch.tensor([c.ids for c in captions], dtype=torch.long),
        lengths=torch.tensor([c.length for c in captions], dtype=torch.long),
        image_ids=tuple(image_ids),
        captions=tuple(captions),
    )


def next_batch(
    dataset: CaptionedImageDataset,
    batch_size: int,
    rng: np.random.Generator,
    vocab: Vocabulary,
    t_max: int = DEFAULT_T_MAX,
) -> Batch:
    """
    不放回地采样 batch_size 张不同图片，每张图均匀采一条描述

    同一批内 image_id 互不相同，保证批内负样本都是真正的不匹配对。
    """
    if batch_size < 1:
        raise DataError(f"batch size must be positive, got {batch_size}")
    if batch_size > len(dataset):
        raise DataError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
    indices = rng.choice(len(dataset), size=batch_size, replace=False)
    examples = [dataset[int(i)] for i in indices]
    picks = [int(rng.integers(len(ex.captions))) for ex in examples]
    captions = [tokenize(ex.captions[k], vocab, t_max) for ex, k in zip(examples, picks)]
    return collate([ex.image for ex in examples], captions, [ex.image_id for ex in examples])


def iter_epoch(
    dataset: CaptionedImageDataset,
    batch_size: int,
    rng: np.random.Generator,
    vocab: Vocabulary,
    t_max: int = DEFAULT_T_MAX,
) -> Iterator[Batch]:
    """一个 epoch：随机排列后按 batch_size 切分，丢弃不足一批的尾部"""
    if batch_size > len(dataset):
        raise DataError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
    order = rng.permutation(len(dataset))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        examples = [dataset[int(i)] for i in order[start:start + batch_size]]
        picks = [int(rng.integers(len(ex.captions))) for ex in examples]
        captions = [tokenize(ex.captions[k], vocab, t_max) for ex, k in zip(examples, picks)]
        yield collate([ex.image for ex in examples], captions, [ex.image_id for ex in examples])


# ------------------------ 磁盘格式 ------------------------
_SHAPE_COLUMNS = ["image_id", "kind", "color", "size", "position", "cx", "cy", "radius", "background"]


def save_dataset(dataset: CaptionedImageDataset, root: Union[str, Path]) -> Path:
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for ex in dataset:
        Image.fromarray(ex.pixels).save(image_dir / f"{ex.image_id}.png")

    with open(root / "captions.tsv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["image_id", "caption"])
        for ex in dataset:
            for caption in ex.captions:
                writer.writerow([ex.image_id, caption])

    if any(ex.shapes for ex in dataset):
        with open(root / "shapes.tsv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(_SHAPE_COLUMNS)
            for ex in dataset:
                for s in ex.shapes:
                    writer.writerow([ex.image_id, s.kind, s.color, s.size, s.position, s.cx, s.cy, s.radius, ex.background])
    logger.info(f"[Data {dataset.name or root.name}] saved {len(dataset)} images to {root}")
    return root


def read_captions_tsv(path: Union[str, Path]) -> List[Tuple[str, str]]:
    """读取 image_id \\t caption 文件，保持文件顺序；首行表头可选"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"captions file not found: {path}")
    rows: List[Tuple[str, str]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), start=1):
            if not row or (lineno == 1 and row[:2] == ["image_id", "caption"]):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected 'image_id<TAB>caption'")
            rows.append((row[0], row[1]))
    return rows


def load_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def load_dataset(root: Union[str, Path], name: str = "") -> CaptionedImageDataset:
    root = Path(root)
    grouped: Dict[str, List[str]] = {}
    for image_id, caption in read_captions_tsv(root / "captions.tsv"):
        grouped.setdefault(image_id, []).append(caption)

    shapes: Dict[str, List[ShapeInfo]] = {}
    backgrounds: Dict[str, str] = {}
    shapes_path = root / "shapes.tsv"
    if shapes_path.exists():
        with open(shapes_path, "r", encoding="utf-8", newline="") as f:
            for row in csv.DictReader(f, delimiter="\t"):
                shapes.setdefault(row["image_id"], []).append(ShapeInfo(
                    kind=row["kind"], color=row["color"], size=row["size"], position=row["position"],
                    cx=int(row["cx"]), cy=int(row["cy"]), radius=int(row["radius"]),
                ))
                backgrounds[row["image_id"]] = row["background"]

    examples = []
    for image_id, captions in grouped.items():
        image_path = root / "images" / f"{image_id}.png"
        if not image_path.exists():
            raise DataError(f"missing image for {image_id}: {image_path}")
        examples.append(PairedExample(
            image_id=image_id,
            pixels=load_image(image_path),
            captions=tuple(captions),
            shapes=tuple(shapes.get(image_id, ())),
            background=backgrounds.get(image_id, ""),
        ))
    return CaptionedImageDataset(examples, name=name or root.name)
