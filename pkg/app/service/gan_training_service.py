#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
GAN 训练：判别器与生成器交替优化

每次迭代：
    1. 采一个批次，冻结的文本编码器编码描述
    2. 生成器产出各阶段图像 x̂₀..x̂ₙ
    3. 每个判别器 Dᵢ 在 (真实图缩放到第 i 阶段, x̂ᵢ.detach()) 上各自更新
    4. 生成器在 Σ L_Gi + λ₁·L_VVM + λ₂·L_VLM + β·kl 上整体更新；L_VLM / L_VVM 只作用于最后一个阶段
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.core.checkpoint import load_run_state, load_vlm, parameter_digest, save_gan, save_run_state
from app.core.config import settings
from app.core.config_manager import config_manager
from app.core.exceptions import CheckpointError, ConfigurationError, DataError
from app.core.history import LossHistory, MetricsLog
from app.core.losses import (
    discriminator_loss,
    generator_adv_loss,
    total_generator_loss,
    vlm_loss,
    vvm_general_loss,
    vvm_global_loss,
    vvm_local_loss,
)
from app.core.metrics import vlms_summary
from app.core.runtime import DTYPES, RngStreams, configure_runtime, resolve_device, torch_generator
from app.data.dataset import Batch, CaptionedImageDataset, next_batch
from app.data.vocab import Vocabulary, tokenize
from app.models.encoders import TextFeatures
from app.models.generator import AttentiveGenerator, GeneratorOutput, build_discriminators, sample_noise
from app.models.vlm import VisionLanguageMatcher
from app.schemas.report import LossReport
from app.schemas.train_config import TrainConfig
from app.service.report_service import plot_history
from app.service.vlm_training_service import check_finite
from app.utils.logger import get_logger

logger = get_logger(__name__)


def stage_real_images(images: torch.Tensor, sizes: Sequence[int]) -> List[torch.Tensor]:
    """真实图按各阶段分辨率做平均池化缩放"""
    full = images.shape[-1]
    out = []
    for size in sizes:
        if full % size != 0:
            raise DataError(f"image size {full} is not a multiple of stage size {size}")
        k = full // size
        out.append(images if k == 1 else F.avg_pool2d(images, kernel_size=k))
    return out


def active_levels(config: TrainConfig) -> Tuple[str, ...]:
    return tuple(level for level, on in (
        ("local", config.use_local_level),
        ("global", config.use_global_level),
        ("general", config.use_general_level),
    ) if on)


@dataclass
class StepContext:
    """一次迭代中判别器与生成器更新共用的张量"""
    batch: Batch
    text: TextFeatures
    output: GeneratorOutput
    real_images: List[torch.Tensor]


class GANTrainer:
    """单次运行的全部可变状态：模型、优化器、随机流、迭代计数与损失历史"""

    def __init__(
        self,
        config: TrainConfig,
        vlm: VisionLanguageMatcher,
        vocab: Vocabulary,
        dataset: CaptionedImageDataset,
        device: Union[str, torch.device] = "cpu",
    ):
        if dataset.image_size != config.image_size:
            raise DataError(f"dataset images are {dataset.image_size}px but the config expects {config.image_size}px")
        if config.batch_size_gan > len(dataset):
            raise DataError(f"batch size {config.batch_size_gan} exceeds dataset size {len(dataset)}")
        self.levels = active_levels(config)
        supervised = (config.use_vlm_supervision and config.lambda2 != 0) or \
                     (config.use_vvm_supervision and config.lambda1 != 0)
        if supervised and not self.levels:
            raise ConfigurationError("VLM/VVM supervision is enabled but every matching level is switched off")
        if any(p.requires_grad for p in vlm.parameters()):
            raise CheckpointError("the vision-language model must be frozen before GAN training")
        vlm_dtype = next(vlm.parameters()).dtype
        if vlm_dtype != DTYPES[config.dtype]:
            raise ConfigurationError(f"dtype {config.dtype} does not match the vision-language model dtype {vlm_dtype}")

        self.config = config
        self.vlm = vlm
        self.vocab = vocab
        self.dataset = dataset
        self.device = torch.device(device)
        self.dtype = DTYPES[config.dtype]

        torch.manual_seed(config.seed)
        self.generator = AttentiveGenerator.from_config(config).to(device=self.device, dtype=self.dtype)
        self.discriminators = build_discriminators(config).to(device=self.device, dtype=self.dtype)
        # 生成器各阶段（含 CA）共用一个优化器，判别器各自独立
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.lr_g, betas=config.betas_gan)
        self.opt_ds = [
            torch.optim.Adam(d.parameters(), lr=config.lr_d, betas=config.betas_gan) for d in self.discriminators
        ]
        self.streams = RngStreams.from_seed(config.seed)
        self.iteration = 0
        self.history = LossHistory()

    @property
    def tag(self) -> str:
        return f"[GAN {self.iteration}/{self.config.gan_iterations}]"

    # ------------------------ 单步的各个阶段 ------------------------
    def prepare(self) -> StepContext:
        c = self.config
        batch = next_batch(self.dataset, c.batch_size_gan, self.streams.data, self.vocab, c.t_max)
        batch = batch.to(self.device, self.dtype)
        with torch.no_grad():
            text = self.vlm.encode_text(batch.ids, batch.lengths)
        z = sample_noise(batch.size, c.z_dim, self.streams.noise, self.dtype).to(self.device)
        self.generator.train()
        output = self.generator(z, text.sentence, text.words, text.mask, generator=self.streams.ca)
        return StepContext(
            batch=batch,
            text=text,
            output=output,
            real_images=stage_real_images(batch.images, self.generator.stage_sizes),
        )

    def update_discriminators(self, ctx: StepContext) -> List[torch.Tensor]:
        losses = []
        sentence = ctx.text.sentence
        for disc, opt, real, fake in zip(self.discriminators, self.opt_ds, ctx.real_images, ctx.output.images):
            opt.zero_grad()
            real_uncond, real_cond = disc(real, sentence)
            fake_uncond, fake_cond = disc(fake.detach(), sentence)
            loss = discriminator_loss(real_uncond, fake_uncond, real_cond, fake_cond)
            check_finite({"L_D": loss}, self.tag)
            loss.backward()
            opt.step()
            losses.append(loss.detach())
        return losses

    def supervision_losses(self, ctx: StepContext) -> Dict[str, torch.Tensor]:
        """最后一个阶段图像上的 TVM（L_VLM）与 VVM（L_VVM）项；被关闭或权重为 0 的项不计算"""
        c = self.config
        want_vlm = c.use_vlm_supervision and c.lambda2 != 0
        want_vvm = c.use_vvm_supervision and c.lambda1 != 0
        out: Dict[str, torch.Tensor] = {}
        if not (want_vlm or want_vvm):
            return out
        fake = self.vlm.encode_image(ctx.output.images[-1])
        if want_vlm:
            matrices = self.vlm.score_matrices(ctx.text, fake, self.levels)
            out.update(vlm_loss(matrices, c.margin, c.hardest_negative, self.levels))
        if want_vvm:
            with torch.no_grad():
                real = self.vlm.encode_image(ctx.batch.images)
            terms = []
            if "global" in self.levels:
                out["L_VG"] = vvm_global_loss(real.global_, fake.global_, c.tau0)
                terms.append(out["L_VG"])
            if "local" in self.levels:
                out["L_VL"] = vvm_local_loss(real.regions, fake.regions, c.tau0, c.gamma3)
                terms.append(out["L_VL"])
            if "general" in self.levels:
                with torch.no_grad():
                    real_scores = self.vlm.msb(ctx.text, real)
                out["L_VGEN"] = vvm_general_loss(real_scores, self.vlm.msb(ctx.text, fake))
                terms.append(out["L_VGEN"])
            out["L_VVM"] = torch.stack(terms).sum()
        return out

    def update_generator(self, ctx: StepContext) -> Dict[str, Any]:
        c = self.config
        for disc in self.discriminators:
            disc.requires_grad_(False)
        try:
            self.opt_g.zero_grad()
            sentence = ctx.text.sentence
            stage_losses = []
            for disc, fake in zip(self.discriminators, ctx.output.images):
                fake_uncond, fake_cond = disc(fake, sentence)
                stage_losses.append(generator_adv_loss(fake_uncond, fake_cond))
            supervision = self.supervision_losses(ctx)
            kl = ctx.output.condition.kl.mean()
            total = total_generator_loss(
                stage_losses,
                vvm=supervision.get("L_VVM"),
                vlm=supervision.get("L_VLM"),
                lambda1=c.lambda1,
                lambda2=c.lambda2,
                kl=kl,
                beta_kl=c.beta_kl,
            )
            check_finite({**supervision, "kl": kl, "L_total": total}, self.tag)
            total.backward()
            self.opt_g.step()
        finally:
            for disc in self.discriminators:
                disc.requires_grad_(True)
        return {
            "stage": [loss.detach() for loss in stage_losses],
            "supervision": {k: v.detach() for k, v in supervision.items()},
            "kl": kl.detach(),
            "total": total.detach(),
        }

    def step(self) -> LossReport:
        ctx = self.prepare()
        d_losses = self.update_discriminators(ctx)
        g = self.update_generator(ctx)
        self.iteration += 1
        report = LossReport(
            **{k: float(v) for k, v in g["supervision"].items()},
            kl=float(g["kl"]),
            L_G_adv=[float(x) for x in g["stage"]],
            L_D=[float(x) for x in d_losses],
            L_total=float(g["total"]),
        )
        if self.iteration % self.config.log_every == 0:
            self.history.append(self.iteration, report)
        return report

    # ------------------------ 监控 ------------------------
    @torch.no_grad()
    def generate_for(self, dataset: CaptionedImageDataset, n: int = 64, seed: int = 0) -> Tuple[torch.Tensor, list]:
        """前 n 张图各取第一条描述生成最终阶段图像；使用独立随机流，不影响训练轨迹"""
        n = min(n, len(dataset))
        captions = [tokenize(dataset[i].captions[0], self.vocab, self.config.t_max) for i in range(n)]
        text = self.vlm.encode_captions(captions)
        noise_gen, ca_gen = torch_generator(seed), torch_generator(seed + 1)
        z = sample_noise(n, self.config.z_dim, noise_gen, self.dtype).to(self.device)
        self.generator.eval()
        images = self.generator(z, text.sentence, text.words, text.mask, generator=ca_gen).images[-1]
        self.generator.train()
        return images, captions

    @torch.no_grad()
    def vlms_snapshot(self, dataset: CaptionedImageDataset, n: int = 64, seed: int = 0) -> Tuple[float, float]:
        images, captions = self.generate_for(dataset, n, seed)
        scores = self.vlm.msb(self.vlm.encode_captions(captions), self.vlm.encode_image(images))
        return vlms_summary(scores.double().cpu().numpy())

    # ------------------------ 续训 ------------------------
    def state_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "config": config_manager.dump_text(self.config),
            "generator": self.generator.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_ds": [opt.state_dict() for opt in self.opt_ds],
            "rng": self.streams.state_dict(),
            "history": self.history.state_dict(),
        }

    def load_state_dict(self, state: Dict[str, Any]):
        if state.get("config") != config_manager.dump_text(self.config):
            raise CheckpointError("run state was produced with a different config")
        try:
            self.generator.load_state_dict(state["generator"])
            self.discriminators.load_state_dict(state["discriminators"])
            self.opt_g.load_state_dict(state["opt_g"])
            for opt, opt_state in zip(self.opt_ds, state["opt_ds"]):
                opt.load_state_dict(opt_state)
        except (KeyError, RuntimeError, ValueError) as e:
            raise CheckpointError(f"run state does not fit the current models ({e})") from e
        self.streams.load_state_dict(state["rng"])
        self.iteration = int(state["iteration"])
        self.history = LossHistory.from_state_dict(state["history"])


@dataclass
class GANTrainingResult:
    trainer: GANTrainer
    out_dir: Path
    vlm_digest: str


class GANTrainingService:
    """GAN 训练服务"""

    def _checkpoint(self, trainer: GANTrainer, out_dir: Path, **extra):
        save_gan(out_dir, trainer.generator, trainer.discriminators, trainer.vlm.text_encoder,
                 trainer.vocab, trainer.config, trainer.iteration, **extra)
        save_run_state(out_dir / "run_state.pt", trainer.state_dict())
        trainer.history.save(out_dir / "loss_history.json")

    def train(
        self,
        dataset: CaptionedImageDataset,
        vlm_dir: Union[str, Path],
        config: TrainConfig,
        out_dir: Union[str, Path],
        resume: bool = False,
        monitor: Optional[CaptionedImageDataset] = None,
    ) -> GANTrainingResult:
        configure_runtime()
        out_dir = Path(out_dir)
        device = resolve_device()
        vlm, vocab, _, _ = load_vlm(vlm_dir, config, device)
        vlm_digest = parameter_digest(vlm)
        trainer = GANTrainer(config, vlm, vocab, dataset, device)

        state_path = out_dir / "run_state.pt"
        if resume:
            if not state_path.exists():
                raise CheckpointError(f"cannot resume, no run state at {state_path}")
            trainer.load_state_dict(load_run_state(state_path))
            logger.info(f"{trainer.tag} resumed from {state_path}")
        metrics_log = MetricsLog(out_dir / "metrics.log", resume_from=trainer.iteration if resume else None)

        total = config.gan_iterations
        levels = ",".join(trainer.levels) or "none"
        logger.info(f"[GAN {dataset.name}] {len(dataset)} pairs, {total} iterations, stages={config.stage_sizes}, "
                    f"λ1={config.lambda1} λ2={config.lambda2} levels={levels}")
        if monitor is not None and trainer.iteration == 0:
            mean, std = trainer.vlms_snapshot(monitor, seed=config.seed)
            logger.info(f"{trainer.tag} monitor VLMS={mean:.4f}±{std:.4f}")

        bar = tqdm(total=total, initial=trainer.iteration, desc="train-gan",
                   disable=None if settings.PROGRESS_BAR else True)
        try:
            while trainer.iteration < total:
                report = trainer.step()
                it = trainer.iteration
                if it % config.log_every == 0:
                    metrics_log.write(it, report)
                    logger.debug(f"{trainer.tag} " + report.to_log_line(it))
                    bar.set_postfix_str(f"L_total={report.L_total:.4f}")
                if it % config.checkpoint_every == 0 and it < total:
                    self._checkpoint(trainer, out_dir)
                    if monitor is not None:
                        mean, std = trainer.vlms_snapshot(monitor, seed=config.seed)
                        logger.info(f"{trainer.tag} monitor VLMS={mean:.4f}±{std:.4f}")
                bar.update(1)
        finally:
            bar.close()

        if parameter_digest(vlm) != vlm_digest:
            raise CheckpointError("frozen vision-language model parameters changed during GAN training")
        self._checkpoint(trainer, out_dir, vlm_digest=vlm_digest)
        plot_history(trainer.history, out_dir / "loss_curve.png", title=f"GAN {dataset.name}")
        last = trainer.history.last()
        logger.info(f"{trainer.tag} finished, L_total={last.get('L_total', float('nan')):.4f}, saved to {out_dir}")
        return GANTrainingResult(trainer=trainer, out_dir=out_dir, vlm_digest=vlm_digest)


gan_training_service = GANTrainingService()
