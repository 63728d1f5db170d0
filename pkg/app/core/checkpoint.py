#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
检查点：torch.save 参数块 + key=value 文本 manifest

VLM 检查点目录：text_encoder.pt / vision_encoder.pt / msb.pt（各带同名 .manifest）,
                vlm.manifest, config.txt, vocab.txt
GAN 检查点目录：gan.pt, gan.manifest, config.txt, vocab.txt, run_state.pt（续训用）
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import torch
import torch.nn as nn

from app.core.config import settings
from app.core.config_manager import config_manager
from app.core.exceptions import CheckpointError, ConfigurationError
from app.core.runtime import DTYPES
from app.data.vocab import Vocabulary
from app.models.encoders import TextEncoder
from app.models.generator import AttentiveGenerator, build_discriminators
from app.models.vlm import VisionLanguageMatcher
from app.schemas.train_config import TrainConfig
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

# 加载时与当前配置逐项比对的几何键
VLM_GEOMETRY_KEYS = ("D", "R", "t_max", "image_size")
GAN_GEOMETRY_KEYS = ("D", "D_hat", "z_dim", "stage_sizes")


def _render(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_manifest(path: PathLike, values: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_render(values[key])}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: PathLike) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"manifest not found: {path}")
    out: Dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def verify_manifest(manifest: Mapping[str, str], expected: Mapping[str, Any], keys=None):
    """expected 中的值转成 manifest 的文本形式后逐项比较，不一致抛 CheckpointError"""
    keys = keys if keys is not None else expected.keys()
    rendered = {k: _render(expected[k]) for k in keys}
    mismatched = [f"{k}: checkpoint={manifest.get(k)!r} active={v!r}" for k, v in rendered.items() if manifest.get(k) != v]
    if mismatched:
        raise CheckpointError("checkpoint does not match the active config (" + "; ".join(mismatched) + ")")


def parameter_digest(module: nn.Module) -> str:
    """state_dict 逐张量字节的 sha1，用于确认冻结模型在训练前后未被改动"""
    h = hashlib.sha1()
    for key, tensor in module.state_dict().items():
        h.update(key.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _load_blob(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def _load_config(ckpt_dir: Path) -> TrainConfig:
    try:
        return config_manager.load(ckpt_dir / "config.txt")
    except ConfigurationError as e:
        raise CheckpointError(f"{ckpt_dir}: unreadable config.txt ({e})") from e


# ------------------------ VLM ------------------------
# 每个部件一个参数块 + 一个 manifest
VLM_PARTS = ("text_encoder", "vision_encoder", "msb")


def vlm_manifest(model: VisionLanguageMatcher, vocab: Vocabulary, config: TrainConfig, **extra) -> Dict[str, Any]:
    return {
        "D": model.embed_dim,
        "R": model.num_regions,
        "t_max": config.t_max,
        "image_size": config.image_size,
        "dtype": config.dtype,
        "vocab_hash": vocab.digest(),
        "seed": config.seed,
        "version": settings.VERSION,
        **extra,
    }


def part_manifest(model: VisionLanguageMatcher, vocab: Vocabulary, config: TrainConfig, part: str) -> Dict[str, Any]:
    values = vlm_manifest(model, vocab, config)
    values["part"] = part
    values["num_params"] = sum(p.numel() for p in getattr(model, part).parameters())
    return values


def save_vlm(out_dir: PathLike, model: VisionLanguageMatcher, vocab: Vocabulary, config: TrainConfig, **extra) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for part in VLM_PARTS:
        torch.save(getattr(model, part).state_dict(), out_dir / f"{part}.pt")
        write_manifest(out_dir / f"{part}.manifest", part_manifest(model, vocab, config, part))
    write_manifest(out_dir / "vlm.manifest", vlm_manifest(model, vocab, config, **extra))
    config_manager.dump(config, out_dir / "config.txt")
    vocab.save(out_dir / "vocab.txt")
    logger.info(f"[Checkpoint] VLM saved to {out_dir} ({', '.join(VLM_PARTS)})")
    return out_dir


def load_vlm(
    ckpt_dir: PathLike,
    config: Optional[TrainConfig] = None,
    device: Union[str, torch.device] = "cpu",
) -> Tuple[VisionLanguageMatcher, Vocabulary, TrainConfig, Dict[str, str]]:
    """
    加载 VLM 检查点

    config 给出时校验几何键（D、R、T_max、分辨率）与之一致，精度不一致抛 ConfigurationError；
    每个部件的 manifest 都与保存时的配置逐项核对。返回的模型已冻结。
    """
    ckpt_dir = Path(ckpt_dir)
    if not ckpt_dir.is_dir():
        raise CheckpointError(f"VLM checkpoint directory not found: {ckpt_dir}")
    manifest = read_manifest(ckpt_dir / "vlm.manifest")
    saved_config = _load_config(ckpt_dir)
    vocab = Vocabulary.load(ckpt_dir / "vocab.txt")
    if manifest.get("vocab_hash") != vocab.digest():
        raise CheckpointError(f"{ckpt_dir}: vocab.txt does not match the manifest vocab_hash")
    if config is not None:
        verify_manifest(manifest, {
            "D": config.embed_dim, "R": config.num_regions, "t_max": config.t_max, "image_size": config.image_size,
        })
        if config.dtype != saved_config.dtype:
            raise ConfigurationError(
                f"dtype {config.dtype} does not match the VLM checkpoint dtype {saved_config.dtype}")
    model = VisionLanguageMatcher(vocab.size, saved_config, pad_id=vocab.pad_id)
    for part in VLM_PARTS:
        part_values = read_manifest(ckpt_dir / f"{part}.manifest")
        verify_manifest(part_values, part_manifest(model, vocab, saved_config, part),
                        keys=VLM_GEOMETRY_KEYS + ("dtype", "vocab_hash", "part", "num_params"))
        try:
            getattr(model, part).load_state_dict(_load_blob(ckpt_dir / f"{part}.pt"))
        except RuntimeError as e:
            raise CheckpointError(f"{ckpt_dir}: {part} blob does not fit the saved config ({e})") from e
    verify_manifest(manifest, vlm_manifest(model, vocab, saved_config), keys=VLM_GEOMETRY_KEYS)
    model = model.to(device=device, dtype=DTYPES[saved_config.dtype]).freeze()
    return model, vocab, saved_config, manifest


# ------------------------ GAN ------------------------
@dataclass
class GANBundle:
    generator: AttentiveGenerator
    discriminators: nn.ModuleList
    text_encoder: TextEncoder
    vocab: Vocabulary
    config: TrainConfig
    manifest: Dict[str, str]


def gan_manifest(config: TrainConfig, iteration: int, **extra) -> Dict[str, Any]:
    return {
        "D": config.embed_dim,
        "D_hat": config.gen_width,
        "z_dim": config.z_dim,
        "stage_sizes": config.stage_sizes,
        "seed": config.seed,
        "iteration": iteration,
        "lambda1": config.lambda1,
        "lambda2": config.lambda2,
        "use_vlm_supervision": config.use_vlm_supervision,
        "use_vvm_supervision": config.use_vvm_supervision,
        "levels": ",".join(lv for lv, on in (("local", config.use_local_level), ("global", config.use_global_level),
                                             ("general", config.use_general_level)) if on),
        "version": settings.VERSION,
        **extra,
    }


def save_gan(out_dir: PathLike, generator: nn.Module, discriminators: nn.ModuleList, text_encoder: TextEncoder,
             vocab: Vocabulary, config: TrainConfig, iteration: int, **extra) -> Path:
    """冻结的文本编码器一并写入，生成时不再依赖 VLM 检查点目录"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({
        "generator": generator.state_dict(),
        "discriminators": discriminators.state_dict(),
        "text_encoder": text_encoder.state_dict(),
    }, out_dir / "gan.pt")
    write_manifest(out_dir / "gan.manifest", gan_manifest(
        config, iteration,
        vocab_hash=vocab.digest(),
        word_dim=text_encoder.encoder.embedding_dim,
        **extra,
    ))
    config_manager.dump(config, out_dir / "config.txt")
    vocab.save(out_dir / "vocab.txt")
    logger.info(f"[Checkpoint] GAN saved to {out_dir} at iteration {iteration}")
    return out_dir


def load_gan(ckpt_dir: PathLike, device: Union[str, torch.device] = "cpu") -> GANBundle:
    """生成器、判别器处于评估模式，文本编码器已冻结"""
    ckpt_dir = Path(ckpt_dir)
    if not ckpt_dir.is_dir():
        raise CheckpointError(f"GAN checkpoint directory not found: {ckpt_dir}")
    manifest = read_manifest(ckpt_dir / "gan.manifest")
    config = _load_config(ckpt_dir)
    vocab = Vocabulary.load(ckpt_dir / "vocab.txt")
    if manifest.get("vocab_hash") != vocab.digest():
        raise CheckpointError(f"{ckpt_dir}: vocab.txt does not match the manifest vocab_hash")
    verify_manifest(manifest, gan_manifest(config, 0), keys=GAN_GEOMETRY_KEYS)
    generator = AttentiveGenerator.from_config(config)
    discriminators = build_discriminators(config)
    text_encoder = TextEncoder(
        vocab.size,
        embed_dim=config.embed_dim,
        word_dim=int(manifest.get("word_dim", config.word_embedding_dim)),
        pad_id=vocab.pad_id,
    )
    blob = _load_blob(ckpt_dir / "gan.pt")
    try:
        generator.load_state_dict(blob["generator"])
        discriminators.load_state_dict(blob["discriminators"])
        text_encoder.load_state_dict(blob["text_encoder"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{ckpt_dir}: parameter blob does not fit the saved config ({e})") from e
    dtype = DTYPES[config.dtype]
    text_encoder = text_encoder.to(device=device, dtype=dtype).eval()
    for p in text_encoder.parameters():
        p.requires_grad_(False)
    return GANBundle(
        generator=generator.to(device=device, dtype=dtype).eval(),
        discriminators=discriminators.to(device=device, dtype=dtype).eval(),
        text_encoder=text_encoder,
        vocab=vocab,
        config=config,
        manifest=manifest,
    )


def save_run_state(path: PathLike, state: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def load_run_state(path: PathLike) -> Dict[str, Any]:
    return _load_blob(Path(path))
