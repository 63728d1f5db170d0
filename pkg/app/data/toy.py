#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
合成图文数据集：纯色背景上的 1~3 个几何形状

每个形状占据一个互不相同的象限，颜色来自与背景色不相交的调色板，
因此描述里的形状/颜色/位置词都可以从像素中唯一还原。
"""

from typing import List, Tuple

import numpy as np

from app.core.exceptions import ConfigurationError
from app.data.dataset import CaptionedImageDataset, PairedExample, ShapeInfo
from app.schemas.data import ToySpec
from app.utils.logger import get_logger

logger = get_logger(__name__)

SHAPE_KINDS = ("circle", "square", "triangle")
SHAPE_COLORS = {
    "red": (220, 30, 30),
    "green": (30, 170, 50),
    "blue": (30, 60, 220),
    "yellow": (235, 200, 20),
    "purple": (140, 40, 190),
}
BACKGROUND_COLORS = {
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "gray": (128, 128, 128),
}
SIZES = ("small", "large")
# 象限名 -> (行, 列)
POSITIONS = {
    "top left": (0, 0),
    "top right": (0, 1),
    "bottom left": (1, 0),
    "bottom right": (1, 1),
}
# 半径占象限边长的比例
_RADIUS_RATIO = {"small": 0.2, "large": 0.34}

NUM_CLASSES = len(SHAPE_KINDS) * len(SHAPE_COLORS)


def class_label(shape: ShapeInfo) -> int:
    """(形状, 颜色) -> 0..14 的类别号，供评价用分类器使用"""
    return SHAPE_KINDS.index(shape.kind) * len(SHAPE_COLORS) + list(SHAPE_COLORS).index(shape.color)


def shape_mask(kind: str, cx: int, cy: int, radius: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "triangle":
        # 尖朝上的等腰三角形，底边宽 2r+1
        depth = yy - (cy - radius)
        return (depth >= 0) & (depth <= 2 * radius) & (2 * np.abs(dx) <= depth)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def render(shapes: List[ShapeInfo], background: str, size: int) -> np.ndarray:
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND_COLORS[background]
    for s in shapes:
        canvas[shape_mask(s.kind, s.cx, s.cy, s.radius, size)] = SHAPE_COLORS[s.color]
    return canvas


def describe(shapes: List[ShapeInfo], background: str) -> Tuple[str, ...]:
    """模板化描述：每个形状两条，多形状时再加一条组合描述"""
    captions = []
    for s in shapes:
        captions.append(f"a {s.size} {s.color} {s.kind} on a {background} background")
        captions.append(f"there is a {s.size} {s.color} {s.kind} in the {s.position} of the image")
    if len(shapes) >= 2:
        a, b = shapes[0], shapes[1]
        captions.append(f"a {a.color} {a.kind} and a {b.color} {b.kind} on a {background} background")
    return tuple(captions)


def _sample_example(rng: np.random.Generator, image_id: str, size: int) -> PairedExample:
    quadrant = size // 2
    n_shapes = int(rng.integers(1, 4))
    position_names = list(POSITIONS)
    picked = rng.choice(len(position_names), size=n_shapes, replace=False)
    background = list(BACKGROUND_COLORS)[int(rng.integers(len(BACKGROUND_COLORS)))]

    shapes = []
    for p in picked:
        position = position_names[int(p)]
        row, col = POSITIONS[position]
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        color = list(SHAPE_COLORS)[int(rng.integers(len(SHAPE_COLORS)))]
        size_word = SIZES[int(rng.integers(len(SIZES)))]
        radius = max(2, int(round(_RADIUS_RATIO[size_word] * quadrant)))
        # 外接框完整落在象限内
        cx = int(rng.integers(col * quadrant + radius, (col + 1) * quadrant - radius))
        cy = int(rng.integers(row * quadrant + radius, (row + 1) * quadrant - radius))
        shapes.append(ShapeInfo(kind=kind, color=color, size=size_word, position=position,
                                cx=cx, cy=cy, radius=radius))

    return PairedExample(
        image_id=image_id,
        pixels=render(shapes, background, size),
        captions=describe(shapes, background),
        shapes=tuple(shapes),
        background=background,
    )


def generate_toy_dataset(spec: ToySpec) -> Tuple[CaptionedImageDataset, CaptionedImageDataset]:
    """
    生成 (训练集, 测试集)

    完全由 (spec, seed) 决定：同样的参数两次调用得到逐字节相同的数据。
    """
    if spec.image_size % 4 != 0 or spec.image_size < 16:
        raise ConfigurationError(f"image_size must be a multiple of 4 and at least 16, got {spec.image_size}")
    if spec.n_train < 1 or spec.n_test < 1:
        raise ConfigurationError(f"n_train and n_test must be >= 1, got {spec.n_train}, {spec.n_test}")

    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train_rng, test_rng = np.random.default_rng(train_seq), np.random.default_rng(test_seq)
    train = CaptionedImageDataset(
        [_sample_example(train_rng, f"train_{i:05d}", spec.image_size) for i in range(spec.n_train)],
        name="train",
    )
    test = CaptionedImageDataset(
        [_sample_example(test_rng, f"test_{i:05d}", spec.image_size) for i in range(spec.n_test)],
        name="test",
    )
    logger.info(f"[Data seed={spec.seed}] generated {len(train)} train / {len(test)} test images of size {spec.image_size}")
    return train, test
