#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
由 GAN 检查点批量生成图像

输出 <image_id>_<k>.png（最终阶段图像）以及 captions.tsv（文件名主干 -> 条件描述），
同一 image_id 出现多次时 k 连续编号。
"""

import csv
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import torch
from PIL import Image

from app.core.checkpoint import load_gan
from app.core.exceptions import ConfigurationError
from app.core.runtime import RngStreams, configure_runtime, resolve_device
from app.data.dataset import tensor_to_pixels
from app.data.vocab import Caption, tokenize
from app.models.generator import sample_noise
from app.utils.logger import get_logger

logger = get_logger(__name__)


class GenerationService:
    """图像生成服务"""

    @torch.no_grad()
    def generate(
        self,
        gan_dir: Union[str, Path],
        captions: Sequence[Tuple[str, str]],
        n_per_caption: int,
        out_dir: Union[str, Path],
        seed: int = 0,
        batch_size: int = 32,
    ) -> List[Path]:
        if n_per_caption < 1:
            raise ConfigurationError(f"n_per_caption must be >= 1, got {n_per_caption}")
        configure_runtime()
        device = resolve_device()
        bundle = load_gan(gan_dir, device)
        config, vocab = bundle.config, bundle.vocab

        # 严格分词：检查点词表之外的词直接报错
        jobs: List[Tuple[str, str, Caption]] = []
        counters: Dict[str, int] = {}
        for image_id, text in captions:
            caption = tokenize(text, vocab, config.t_max, strict=True)
            for _ in range(n_per_caption):
                k = counters.get(image_id, 0)
                counters[image_id] = k + 1
                jobs.append((f"{image_id}_{k}", text, caption))

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        streams = RngStreams.from_seed(seed)
        dtype = next(bundle.generator.parameters()).dtype
        paths: List[Path] = []
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start:start + batch_size]
            ids = torch.tensor([c.ids for _, _, c in chunk], dtype=torch.long, device=device)
            lengths = torch.tensor([c.length for _, _, c in chunk], dtype=torch.long, device=device)
            text = bundle.text_encoder(ids, lengths)
            z = sample_noise(len(chunk), config.z_dim, streams.noise, dtype).to(device)
            images = bundle.generator(z, text.sentence, text.words, text.mask, generator=streams.ca).images[-1]
            for (stem, _, _), image in zip(chunk, images):
                path = out_dir / f"{stem}.png"
                Image.fromarray(tensor_to_pixels(image)).save(path)
                paths.append(path)

        with open(out_dir / "captions.tsv", "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(["image_id", "caption"])
            for stem, text, _ in jobs:
                writer.writerow([stem, text])
        logger.info(f"[Generate] {len(paths)} images from {len(captions)} captions written to {out_dir}")
        return paths


generation_service = GenerationService()
