#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
桌面规模 IS/FID 的特征网络：在合成数据 (形状, 颜色) 标签上训练的小卷积分类器

softmax 输出喂给 IS，倒数第二层特征喂给 FID。
"""

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import DataError, ShapeError
from app.data.dataset import CaptionedImageDataset
from app.data.toy import NUM_CLASSES, class_label
from app.models.encoders import down_block
from app.utils.logger import get_logger

logger = get_logger(__name__)


def dataset_labels(dataset: CaptionedImageDataset) -> np.ndarray:
    """每张图第一个形状的类别号；缺少形状元数据时报错"""
    missing = [ex.image_id for ex in dataset if not ex.shapes]
    if missing:
        raise DataError(f"{len(missing)} images carry no shape metadata (e.g. {missing[0]}), shapes.tsv is required")
    return np.array([class_label(ex.shapes[0]) for ex in dataset], dtype=np.int64)


class ToyClassifier(nn.Module):
    def __init__(self, image_size: int = 64, width: int = 16, feature_dim: int = 64, num_classes: int = NUM_CLASSES):
        super().__init__()
        if image_size % 8 != 0:
            raise ShapeError(f"classifier input size must be divisible by 8, got {image_size}")
        self.image_size = image_size
        self.num_classes = num_classes
        self.backbone = nn.Sequential(
            down_block(3, width),
            down_block(width, width * 2),
            down_block(width * 2, width * 4),
        )
        self.fc = nn.Linear(width * 4, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """倒数第二层特征 (N, feature_dim)"""
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-1] != self.image_size:
            raise ShapeError(f"expected N×3×{self.image_size}×{self.image_size} images, got {tuple(images.shape)}")
        x = self.backbone(images)
        return F.relu(self.fc(x.mean(dim=(2, 3))))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 128):
        """返回 (概率 N×K, 特征 N×d)，float64 numpy"""
        self.eval()
        dtype = next(self.parameters()).dtype
        probs, feats = [], []
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size].to(dtype)
            f = self.features(chunk)
            probs.append(F.softmax(self.head(f), dim=1).double())
            feats.append(f.double())
        return torch.cat(probs).numpy(), torch.cat(feats).numpy()


def train_classifier(
    dataset: CaptionedImageDataset,
    seed: int = 0,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> ToyClassifier:
    """固定种子下确定性训练"""
    labels = torch.from_numpy(dataset_labels(dataset))
    images = dataset.images()
    torch.manual_seed(seed)
    model = ToyClassifier(image_size=dataset.image_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / batch_size))

    model.train()
    loss = torch.zeros(())
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        for step in range(steps_per_epoch):
            idx = order[step * batch_size:(step + 1) * batch_size]
            optimizer.zero_grad()
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            loss.backward()
            optimizer.step()
        if (epoch + 1) % 10 == 0 or epoch + 1 == epochs:
            logger.debug(f"[Classifier {epoch + 1}/{epochs}] loss={loss.item():.4f}")

    model.eval()
    with torch.no_grad():
        accuracy = (model(images).argmax(dim=1) == labels).double().mean().item()
    logger.info(f"[Classifier] trained on {n} images, train accuracy={accuracy:.3f}")
    return model
