#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
VLMS 探针：在真实图文对上施加受控扰动，检查 VLMS 是否随配对质量单调变化

行：真实配对、随机重配对、图像噪声 σ 列表、描述删词 / 换词比例列表、停用词删除。
"""

import csv
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from app.core.checkpoint import load_vlm
from app.core.metrics import vlms_summary
from app.core.perturb import derangement, mask_words, perturb_image
from app.core.runtime import configure_runtime, resolve_device, torch_generator
from app.data.dataset import CaptionedImageDataset
from app.data.vocab import Caption, Vocabulary, tokenize
from app.models.vlm import VisionLanguageMatcher
from app.schemas.report import ProbeRow
from app.service.evaluation_service import score_pairs
from app.service.report_service import plot_probe_table
from app.utils.json_sanitize import write_json
from app.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_SIGMAS = (0.01, 0.1, 0.3, 0.5, 1.0)
DEFAULT_MASK_FRACTIONS = (0.1, 0.2, 0.5, 0.7, 0.9)


def _row(probe: str, scores: np.ndarray, level: Optional[float] = None) -> ProbeRow:
    mean, std = vlms_summary(scores)
    return ProbeRow(probe=probe, level=level, vlms_mean=mean, vlms_std=std, n=int(scores.size))


class VLMSProbeService:
    """VLMS 验证服务"""

    def run(
        self,
        vlm: VisionLanguageMatcher,
        vocab: Vocabulary,
        dataset: CaptionedImageDataset,
        sigmas: Sequence[float] = DEFAULT_SIGMAS,
        mask_fractions: Sequence[float] = DEFAULT_MASK_FRACTIONS,
        seed: int = 0,
        replace: bool = True,
    ) -> List[ProbeRow]:
        rng = np.random.default_rng(seed)
        t_max = vlm.t_max
        # 每张图采一条描述，所有探针共用
        captions: List[Caption] = [
            tokenize(ex.captions[int(rng.integers(len(ex.captions)))], vocab, t_max) for ex in dataset
        ]
        partner = derangement(len(dataset), rng)
        images = dataset.images()

        rows = [
            _row("ground_truth", score_pairs(vlm, images, captions)),
            _row("random", score_pairs(vlm, images, [captions[int(j)] for j in partner])),
        ]
        # 每一行各自重新播种，结果与列表顺序无关
        for sigma in sigmas:
            noisy = perturb_image(images, float(sigma), torch_generator(seed))
            rows.append(_row("noise", score_pairs(vlm, noisy, captions), level=float(sigma)))
        modes = ("mask", "replace") if replace else ("mask",)
        for mode in modes:
            for p in mask_fractions:
                mask_rng = np.random.default_rng([seed, int(round(float(p) * 1000))])
                masked = [mask_words(c, vocab, "fraction" if mode == "mask" else "replace", float(p), mask_rng)
                          for c in captions]
                rows.append(_row(mode, score_pairs(vlm, images, masked), level=float(p)))
        stop = [mask_words(c, vocab, "stopwords") for c in captions]
        rows.append(_row("stopwords", score_pairs(vlm, images, stop)))

        for row in rows:
            level = "" if row.level is None else f"@{row.level:g}"
            logger.info(f"[Probe {row.probe}{level}] VLMS={row.vlms_mean:.4f}±{row.vlms_std:.4f} n={row.n}")
        return rows

    def probe(
        self,
        dataset: CaptionedImageDataset,
        vlm_dir: Union[str, Path],
        out_dir: Optional[Union[str, Path]] = None,
        sigmas: Sequence[float] = DEFAULT_SIGMAS,
        mask_fractions: Sequence[float] = DEFAULT_MASK_FRACTIONS,
        seed: int = 0,
        replace: bool = True,
    ) -> List[ProbeRow]:
        configure_runtime()
        vlm, vocab, _, _ = load_vlm(vlm_dir, device=resolve_device())
        with torch.no_grad():
            rows = self.run(vlm, vocab, dataset, sigmas, mask_fractions, seed, replace)
        if out_dir is not None:
            self.write_table(rows, out_dir, seed=seed)
        return rows

    def write_table(self, rows: Sequence[ProbeRow], out_dir: Union[str, Path], seed: int = 0):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "vlms_probe.json", {"seed": seed, "rows": [row.model_dump() for row in rows]})
        with open(out_dir / "vlms_probe.tsv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(["probe", "level", "vlms_mean", "vlms_std", "n"])
            for row in rows:
                writer.writerow([row.probe, "" if row.level is None else f"{row.level:g}",
                                 f"{row.vlms_mean:.6f}", f"{row.vlms_std:.6f}", row.n])
        plot_probe_table(rows, out_dir / "vlms_probe.png")


vlms_probe_service = VLMSProbeService()
