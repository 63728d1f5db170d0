#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
命令行入口

    vlmgan gen-data   --out DIR [--n-train N] [--n-test N] [--image-size S] [--seed K]
    vlmgan train-vlm  --data DIR --out DIR [--config FILE] [--include-test] [--seed K] [--set key=value ...]
    vlmgan train-gan  --data DIR --vlm DIR --out DIR [--config FILE] [--resume] [--seed K] [--set key=value ...]
    vlmgan generate   --gan DIR --captions FILE --n-per-caption N --out DIR [--seed K]
    vlmgan evaluate   --generated DIR --data DIR --vlm DIR --out DIR [--seed K]
    vlmgan vlms-probe --data DIR --vlm DIR --out DIR [--sigmas ...] [--mask-fractions ...]
    vlmgan report     --runs DIR [DIR ...] --out DIR

成功返回 0；失败时向 stderr 输出一行 error=<类别> message=<信息> 并返回该类别的退出码。
"""

import argparse
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from app.core.config import settings
from app.core.config_manager import config_manager
from app.core.exceptions import ConfigurationError, DataError, VLMGANError
from app.data.dataset import CaptionedImageDataset, load_dataset, read_captions_tsv, save_dataset
from app.data.toy import generate_toy_dataset
from app.data.vocab import Vocabulary, build_vocab
from app.schemas.data import ToySpec
from app.schemas.train_config import TrainConfig
from app.utils.json_sanitize import write_json
from app.utils.logger import get_logger, setup_logging

logger = get_logger(__name__)

INTERNAL_EXIT_CODE = 70


# ------------------------ 公共工具 ------------------------
def load_split(data_dir: str, split: str, fallback_to_root: bool = True) -> CaptionedImageDataset:
    """gen-data 输出目录下的 train/ 或 test/；目录本身就是一个划分时直接读取"""
    root = Path(data_dir)
    if (root / split / "captions.tsv").exists():
        return load_dataset(root / split, name=split)
    if fallback_to_root and (root / "captions.tsv").exists():
        return load_dataset(root)
    raise DataError(f"no {split} split under {root}")


def has_split(data_dir: str, split: str) -> bool:
    return (Path(data_dir) / split / "captions.tsv").exists()


def resolve_config(args) -> TrainConfig:
    """配置文件 + --set 覆盖 + --seed"""
    raw: Dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        raw = config_manager.parse_text(path.read_text(encoding="utf-8"))
    if args.set:
        raw.update(config_manager.parse_text("\n".join(args.set)))
    return config_manager.build(raw, seed=args.seed)


def write_run_manifest(out_dir: str, command: str, args, config: Optional[TrainConfig] = None,
                       seed: Optional[int] = None):
    flags = {k: v for k, v in vars(args).items() if k not in ("handler", "command")}
    manifest = {
        "command": command,
        "flags": flags,
        "seed": seed if seed is not None else (config.seed if config is not None else getattr(args, "seed", None)),
        "version": settings.VERSION,
    }
    if config is not None:
        manifest["config"] = config.model_dump()
    write_json(Path(out_dir) / "manifest.json", manifest)


# ------------------------ 各命令 ------------------------
def cmd_gen_data(args):
    spec = ToySpec(n_train=args.n_train, n_test=args.n_test, image_size=args.image_size, seed=args.seed)
    write_run_manifest(args.out, "gen-data", args, seed=args.seed)
    train, test = generate_toy_dataset(spec)
    out = Path(args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    build_vocab(train.merged(test)).save(out / "vocab.txt")


def cmd_train_vlm(args):
    from app.service.vlm_training_service import vlm_training_service

    config = resolve_config(args)
    write_run_manifest(args.out, "train-vlm", args, config)
    train = load_split(args.data, "train")
    test = load_split(args.data, "test", fallback_to_root=False) if has_split(args.data, "test") else None
    vocab_path = Path(args.data) / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    vlm_training_service.train(train, config, vocab=vocab, test_dataset=test,
                               include_test=args.include_test, out_dir=args.out)


def cmd_train_gan(args):
    from app.service.gan_training_service import gan_training_service

    config = resolve_config(args)
    write_run_manifest(args.out, "train-gan", args, config)
    train = load_split(args.data, "train")
    monitor = load_split(args.data, "test", fallback_to_root=False) if has_split(args.data, "test") else None
    gan_training_service.train(train, args.vlm, config, args.out, resume=args.resume, monitor=monitor)


def cmd_generate(args):
    from app.service.generation_service import generation_service

    write_run_manifest(args.out, "generate", args, seed=args.seed)
    captions = read_captions_tsv(args.captions)
    if not captions:
        raise DataError(f"{args.captions} contains no captions")
    generation_service.generate(args.gan, captions, args.n_per_caption, args.out,
                                seed=args.seed, batch_size=args.batch_size)


def cmd_evaluate(args):
    from app.service.evaluation_service import evaluation_service

    write_run_manifest(args.out, "evaluate", args, seed=args.seed)
    reference = load_split(args.data, "test")
    classifier_data = load_split(args.data, "train", fallback_to_root=False) if has_split(args.data, "train") else None
    evaluation_service.evaluate(
        args.generated, reference, args.vlm, out_dir=args.out, seed=args.seed, pool_size=args.pool_size,
        n_splits=args.splits, classifier_data=classifier_data, classifier_epochs=args.classifier_epochs,
    )


def cmd_vlms_probe(args):
    from app.service.probe_service import vlms_probe_service

    write_run_manifest(args.out, "vlms-probe", args, seed=args.seed)
    dataset = load_split(args.data, "test")
    vlms_probe_service.probe(dataset, args.vlm, out_dir=args.out, sigmas=args.sigmas,
                             mask_fractions=args.mask_fractions, seed=args.seed, replace=not args.no_replace)


def cmd_report(args):
    from app.service.report_service import report_service

    write_run_manifest(args.out, "report", args)
    report_service.build(args.runs, args.out)


# ------------------------ 参数解析 ------------------------
def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key = value 配置文件")
    p.add_argument("--seed", type=int, default=None, help="覆盖配置中的随机种子")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖单个配置项，可重复")


def build_parser() -> argparse.ArgumentParser:
    from app.service.probe_service import DEFAULT_MASK_FRACTIONS, DEFAULT_SIGMAS

    parser = argparse.ArgumentParser(prog="vlmgan", description="VLMGAN desk-scale toolkit")
    parser.add_argument("--log-level", default=None, help="覆盖 VLMGAN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="生成合成图文数据集")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train-vlm", help="预训练视觉-语言匹配模型")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include-test", action="store_true", help="训练集 + 测试集，得到评价用检查点")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_train_vlm)

    p = sub.add_parser("train-gan", help="在冻结的 VLM 监督下训练多阶段 GAN")
    p.add_argument("--data", required=True)
    p.add_argument("--vlm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_train_gan)

    p = sub.add_parser("generate", help="由描述文件生成图像")
    p.add_argument("--gan", required=True)
    p.add_argument("--captions", required=True, help="image_id \\t caption")
    p.add_argument("--n-per-caption", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("evaluate", help="VLMS / IS / FID / R-precision")
    p.add_argument("--generated", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vlm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--classifier-epochs", type=int, default=30)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("vlms-probe", help="扰动探针验证 VLMS")
    p.add_argument("--data", required=True)
    p.add_argument("--vlm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigmas", type=float, nargs="+", default=list(DEFAULT_SIGMAS))
    p.add_argument("--mask-fractions", type=float, nargs="+", default=list(DEFAULT_MASK_FRACTIONS))
    p.add_argument("--no-replace", action="store_true", help="不输出换词（unk）行")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_vlms_probe)

    p = sub.add_parser("report", help="损失曲线与探针图")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logging(args.log_level)
    handler: Callable = args.handler
    try:
        handler(args)
    except VLMGANError as e:
        logger.debug(traceback.format_exc())
        print(f"error={e.category} message={_one_line(e)}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(traceback.format_exc())
        print(f"error=internal message={_one_line(f'{type(e).__name__}: {e}')}", file=sys.stderr)
        return INTERNAL_EXIT_CODE
    logger.info(f"[CLI {args.command}] done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
