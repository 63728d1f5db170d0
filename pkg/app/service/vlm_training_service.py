#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
VLM 预训练：联合训练文本编码器、视觉编码器与 MSB，最小化 L_VLM

include_test=False 得到监督用检查点（只用训练集）；
include_test=True 得到评价用检查点（训练集 + 测试集）。
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
from tqdm import tqdm

from app.core.checkpoint import save_vlm
from app.core.config import settings
from app.core.exceptions import DataError, DivergenceError
from app.core.history import LossHistory, MetricsLog
from app.core.losses import vlm_loss
from app.core.perturb import derangement
from app.core.runtime import DTYPES, RngStreams, configure_runtime, resolve_device
from app.data.dataset import CaptionedImageDataset, iter_epoch
from app.data.vocab import Vocabulary, build_vocab, tokenize
from app.models.vlm import VisionLanguageMatcher
from app.schemas.report import LossReport
from app.schemas.train_config import TrainConfig
from app.service.report_service import plot_history
from app.utils.logger import get_logger

logger = get_logger(__name__)


def check_finite(losses: Dict[str, torch.Tensor], tag: str):
    """任一损失非有限即中止，附带当前全部损失值"""
    values = {k: float(v.detach()) for k, v in losses.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        detail = " ".join(f"{k}={v:.6g}" for k, v in values.items())
        raise DivergenceError(f"{tag} non-finite loss {', '.join(bad)}: {detail}")


@dataclass
class VLMTrainingResult:
    model: VisionLanguageMatcher
    vocab: Vocabulary
    history: LossHistory
    steps: int
    out_dir: Optional[Path] = None


@torch.no_grad()
def matching_separation(
    model: VisionLanguageMatcher,
    dataset: CaptionedImageDataset,
    vocab: Vocabulary,
    seed: int = 0,
    t_max: int = None,
    batch_size: int = 64,
) -> Dict[str, float]:
    """
    MSB 在匹配对与错配对上的平均得分差

    每张图均匀采一条自己的描述作为匹配对，再按随机循环移位取另一张图的描述作为错配对。
    """
    t_max = t_max or model.t_max
    rng = np.random.default_rng(seed)
    n = len(dataset)
    own = [tokenize(ex.captions[int(rng.integers(len(ex.captions)))], vocab, t_max) for ex in dataset]
    partner = derangement(n, rng)
    matched, mismatched = [], []
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        image = model.encode_image(dataset.images(idx))
        text = model.encode_captions([own[i] for i in idx])
        other = model.encode_captions([own[int(partner[i])] for i in idx])
        matched.append(model.msb(text, image).double().cpu())
        mismatched.append(model.msb(other, image).double().cpu())
    m, mm = torch.cat(matched).mean().item(), torch.cat(mismatched).mean().item()
    return {"matched": m, "mismatched": mm, "separation": m - mm}


class VLMTrainingService:
    """VLM 训练服务"""

    def train(
        self,
        dataset: CaptionedImageDataset,
        config: TrainConfig,
        vocab: Optional[Vocabulary] = None,
        test_dataset: Optional[CaptionedImageDataset] = None,
        include_test: bool = False,
        out_dir: Optional[Union[str, Path]] = None,
    ) -> VLMTrainingResult:
        configure_runtime()
        if include_test:
            if test_dataset is None:
                raise DataError("include_test requires a test split")
            dataset = dataset.merged(test_dataset, name=f"{dataset.name}+{test_dataset.name}")
        vocab = vocab or build_vocab(dataset)
        if dataset.image_size != config.image_size:
            raise DataError(f"dataset images are {dataset.image_size}px but the config expects {config.image_size}px")
        batch_size = config.batch_size_vlm
        if batch_size > len(dataset):
            raise DataError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")

        device, dtype = resolve_device(), DTYPES[config.dtype]
        streams = RngStreams.from_seed(config.seed)
        torch.manual_seed(config.seed)
        model = VisionLanguageMatcher(vocab.size, config, pad_id=vocab.pad_id).to(device=device, dtype=dtype)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_vlm, betas=config.betas_vlm)

        steps_per_epoch = len(dataset) // batch_size
        total = config.vlm_epochs * steps_per_epoch
        tag = dataset.name or "VLM"
        history = LossHistory()
        metrics_log = MetricsLog(Path(out_dir) / "metrics.log") if out_dir is not None else None
        logger.info(f"[VLM {tag}] {len(dataset)} pairs, vocab={vocab.size}, {total} steps "
                    f"({config.vlm_epochs} epochs x {steps_per_epoch})")

        model.train()
        step = 0
        bar = tqdm(total=total, desc="train-vlm", disable=None if settings.PROGRESS_BAR else True)
        try:
            for _ in range(config.vlm_epochs):
                for batch in iter_epoch(dataset, batch_size, streams.data, vocab, config.t_max):
                    batch = batch.to(device, dtype)
                    step += 1

                    text = model.encode_text(batch.ids, batch.lengths)
                    image = model.encode_image(batch.images)
                    losses = vlm_loss(model.score_matrices(text, image), config.margin, config.hardest_negative)
                    check_finite(losses, f"[VLM {step}/{total}]")
                    optimizer.zero_grad()
                    losses["L_VLM"].backward()
                    optimizer.step()

                    if step % config.log_every == 0:
                        report = LossReport(**{k: float(v.detach()) for k, v in losses.items()})
                        history.append(step, report)
                        if metrics_log is not None:
                            metrics_log.write(step, report)
                        logger.debug(f"[VLM {step}/{total}] " + report.to_log_line(step))
                        bar.set_postfix_str(f"L_VLM={report.L_VLM:.4f}")
                    bar.update(1)
        finally:
            bar.close()

        model.freeze()
        last = history.last()
        logger.info(f"[VLM {tag}] finished {step} steps, L_VLM={last.get('L_VLM', float('nan')):.4f}")

        if out_dir is not None:
            out_dir = Path(out_dir)
            extra = {"include_test": include_test, "steps": step, "n_pairs": len(dataset)}
            if test_dataset is not None and not include_test:
                sep = matching_separation(model, test_dataset, vocab, seed=config.seed, t_max=config.t_max)
                logger.info(f"[VLM {tag}] held-out MSB matched={sep['matched']:.4f} "
                            f"mismatched={sep['mismatched']:.4f} separation={sep['separation']:.4f}")
                extra["held_out_separation"] = f"{sep['separation']:.6f}"
            save_vlm(out_dir, model, vocab, config, **extra)
            history.save(out_dir / "loss_history.json")
            plot_history(history, out_dir / "loss_curve.png", title=f"VLM {tag}")
        return VLMTrainingResult(model=model, vocab=vocab, history=history, steps=step, out_dir=out_dir)


vlm_training_service = VLMTrainingService()
