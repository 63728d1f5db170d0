#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
生成图像评价：VLMS、IS、FID、R-precision

输入目录布局：
    <generated>/<image_id>_<k>.png
    <generated>/captions.tsv     文件名主干 \\t 条件描述
"""

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from app.core.checkpoint import load_vlm, read_manifest, write_manifest
from app.core.exceptions import DataError, ShapeError
from app.core.metrics import (
    fid,
    gaussian_stats,
    inception_score_splits,
    retrieval_hits,
    sample_distractors,
    split_mean_std,
    vlms_summary,
)
from app.core.runtime import configure_runtime, resolve_device
from app.data.dataset import CaptionedImageDataset, load_image, pixels_to_tensor, read_captions_tsv
from app.data.vocab import Caption, Vocabulary, tokenize
from app.models.classifier import ToyClassifier, train_classifier
from app.models.vlm import VisionLanguageMatcher
from app.schemas.report import MetricReport
from app.service.report_service import plot_metrics
from app.utils.json_sanitize import write_json
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

CLASSIFIER_EPOCHS = 30


@dataclass
class GeneratedSet:
    stems: List[str]
    owners: List[int]
    captions: List[str]
    images: torch.Tensor


def owner_id(stem: str) -> str:
    """<image_id>_<k> -> image_id"""
    image_id, sep, k = stem.rpartition("_")
    if not sep or not k.isdigit():
        raise DataError(f"generated file stem {stem!r} is not of the form <image_id>_<k>")
    return image_id


def load_generated(generated_dir: PathLike, dataset: CaptionedImageDataset) -> GeneratedSet:
    generated_dir = Path(generated_dir)
    rows = read_captions_tsv(generated_dir / "captions.tsv")
    if not rows:
        raise DataError(f"{generated_dir}/captions.tsv lists no generated images")
    stems, owners, captions, images = [], [], [], []
    for stem, caption in rows:
        path = generated_dir / f"{stem}.png"
        if not path.exists():
            raise DataError(f"missing generated image for {stem}: {path}")
        pixels = load_image(path)
        if pixels.shape[0] != dataset.image_size or pixels.shape[1] != dataset.image_size:
            raise ShapeError(f"{path.name} is {pixels.shape[1]}×{pixels.shape[0]}, "
                             f"reference images are {dataset.image_size}px")
        stems.append(stem)
        owners.append(dataset.index_of(owner_id(stem)))
        captions.append(caption)
        images.append(pixels_to_tensor(pixels))
    return GeneratedSet(stems=stems, owners=owners, captions=captions, images=torch.stack(images))


@torch.no_grad()
def score_pairs(vlm: VisionLanguageMatcher, images: torch.Tensor, captions: Sequence[Caption],
                batch_size: int = 64) -> np.ndarray:
    """逐对 MSB 得分，float64"""
    if images.shape[0] != len(captions):
        raise DataError(f"{images.shape[0]} images but {len(captions)} captions")
    out = []
    for start in range(0, len(captions), batch_size):
        text = vlm.encode_captions(captions[start:start + batch_size])
        image = vlm.encode_image(images[start:start + batch_size])
        out.append(vlm.msb(text, image).double().cpu())
    return torch.cat(out).numpy()


@torch.no_grad()
def encode_sentences(vlm: VisionLanguageMatcher, captions: Sequence[Caption], batch_size: int = 256) -> np.ndarray:
    return torch.cat([
        vlm.encode_captions(captions[start:start + batch_size]).sentence.double().cpu()
        for start in range(0, len(captions), batch_size)
    ]).numpy()


@torch.no_grad()
def encode_global(vlm: VisionLanguageMatcher, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    return torch.cat([
        vlm.encode_image(images[start:start + batch_size]).global_.double().cpu()
        for start in range(0, images.shape[0], batch_size)
    ]).numpy()


def r_precision_hits(
    vlm: VisionLanguageMatcher,
    vocab: Vocabulary,
    images: torch.Tensor,
    owners: Sequence[int],
    captions: Sequence[str],
    dataset: CaptionedImageDataset,
    pool_size: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """
    每张图的真描述与 pool_size−1 条不属于同一张参考图的干扰描述按全局余弦排序，命中 = 真描述排第一

    干扰描述来自参考数据集的描述池；平局时描述池下标小者优先，不在池中的真描述下标记为池大小。
    """
    if pool_size < 1:
        raise DataError(f"pool_size must be >= 1, got {pool_size}")
    pool = dataset.caption_pool()
    pool_owner = np.array([i for i, _ in pool], dtype=np.int64)
    pool_index = {(i, text): n for n, (i, text) in reversed(list(enumerate(pool)))}
    t_max = vlm.t_max
    pool_feats = encode_sentences(vlm, [tokenize(text, vocab, t_max) for _, text in pool])
    true_feats = encode_sentences(vlm, [tokenize(text, vocab, t_max) for text in captions])
    query = encode_global(vlm, images)

    rng = np.random.default_rng(seed)
    n, d = query.shape
    candidates = np.empty((n, pool_size, d))
    candidate_ids = np.empty((n, pool_size), dtype=np.int64)
    for q in range(n):
        distractors = sample_distractors(rng, pool_owner, owners[q], pool_size - 1)
        candidates[q, 0] = true_feats[q]
        candidates[q, 1:] = pool_feats[distractors]
        candidate_ids[q, 0] = pool_index.get((owners[q], captions[q]), len(pool))
        candidate_ids[q, 1:] = distractors
    return retrieval_hits(query, candidates, candidate_ids, np.zeros(n, dtype=np.int64))


def _dataset_digest(dataset: CaptionedImageDataset) -> str:
    h = hashlib.sha1()
    for ex in dataset:
        h.update(ex.image_id.encode("utf-8"))
        h.update(ex.pixels.tobytes())
    return h.hexdigest()[:16]


class EvaluationService:
    """评价服务"""

    def classifier(self, dataset: CaptionedImageDataset, seed: int, cache_dir: Optional[PathLike] = None,
                   epochs: int = CLASSIFIER_EPOCHS) -> ToyClassifier:
        """IS/FID 特征网络；cache_dir 下已有同一数据、同一种子训练的权重时直接复用"""
        expected = {"data": _dataset_digest(dataset), "seed": seed, "epochs": epochs, "image_size": dataset.image_size}
        if cache_dir is not None:
            cache_dir = Path(cache_dir)
            weights, manifest_path = cache_dir / "classifier.pt", cache_dir / "classifier.manifest"
            if weights.exists() and manifest_path.exists():
                manifest = read_manifest(manifest_path)
                if all(manifest.get(k) == str(v) for k, v in expected.items()):
                    model = ToyClassifier(image_size=dataset.image_size)
                    model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
                    logger.info(f"[Evaluate] reusing cached classifier from {cache_dir}")
                    return model.eval()
        model = train_classifier(dataset, seed=seed, epochs=epochs)
        if cache_dir is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)
            torch.save(model.state_dict(), cache_dir / "classifier.pt")
            write_manifest(cache_dir / "classifier.manifest", expected)
        return model

    def evaluate(
        self,
        generated_dir: PathLike,
        dataset: CaptionedImageDataset,
        vlm_dir: PathLike,
        out_dir: Optional[PathLike] = None,
        seed: int = 0,
        pool_size: int = 100,
        n_splits: int = 10,
        classifier_data: Optional[CaptionedImageDataset] = None,
        classifier_epochs: int = CLASSIFIER_EPOCHS,
    ) -> MetricReport:
        configure_runtime()
        generated = load_generated(generated_dir, dataset)
        vlm, vocab, vlm_config, _ = load_vlm(vlm_dir, device=resolve_device())
        n = len(generated.stems)
        logger.info(f"[Evaluate] {n} generated images against {len(dataset)} reference images")

        tokenized = [tokenize(text, vocab, vlm_config.t_max) for text in generated.captions]
        vlms_mean, vlms_std = vlms_summary(score_pairs(vlm, generated.images, tokenized))

        hits = r_precision_hits(vlm, vocab, generated.images, generated.owners, generated.captions,
                                dataset, pool_size=pool_size, seed=seed)
        r_mean, r_std = split_mean_std(hits.astype(np.float64), n_splits)

        classifier = self.classifier(classifier_data or dataset, seed, cache_dir=out_dir, epochs=classifier_epochs)
        probs, fake_feats = classifier.predict(generated.images)
        _, real_feats = classifier.predict(dataset.images())
        is_mean, is_std = inception_score_splits(probs, n_splits)
        fid_value = fid(gaussian_stats(fake_feats), gaussian_stats(real_feats))

        report = MetricReport(
            vlms_mean=vlms_mean,
            vlms_std=vlms_std,
            is_mean=is_mean,
            is_std=is_std,
            fid=fid_value,
            r_precision_mean=r_mean,
            r_precision_std=r_std,
            n_samples=n,
        )
        logger.info(f"[Evaluate] VLMS={vlms_mean:.4f}±{vlms_std:.4f} IS={is_mean:.3f}±{is_std:.3f} "
                    f"FID={fid_value:.4f} R-precision={r_mean:.4f}±{r_std:.4f}")
        if out_dir is not None:
            self.write_report(report, out_dir)
        return report

    def write_report(self, report: MetricReport, out_dir: PathLike) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        values = report.model_dump()
        with open(out_dir / "metrics.tsv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(["metric", "value"])
            for key in sorted(values):
                writer.writerow([key, values[key]])
        return {
            "json": write_json(out_dir / "metrics.json", values),
            "tsv": out_dir / "metrics.tsv",
            "png": plot_metrics(report, out_dir / "metrics.png"),
        }


evaluation_service = EvaluationService()
