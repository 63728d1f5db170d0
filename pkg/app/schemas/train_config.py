from typing import Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class TrainConfig(BaseModel):
    """
    一次运行的完整配置：模型几何、匹配/损失超参数、优化器、迭代预算与消融开关。

    默认值为桌面规模（toy）设定；全尺寸设定的对应值写在字段描述里。
    """
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = Field(0, ge=0, description="随机种子")
    dtype: Literal["float32", "float64"] = Field("float32", description="训练精度")

    # 文本
    t_max: int = Field(16, ge=1, description="最大词数 T_max")
    word_embedding_dim: int = Field(64, gt=0, description="词向量维度")
    text_dropout: float = Field(0.0, ge=0.0, lt=1.0, description="文本编码器 dropout")

    # 公共嵌入空间
    embed_dim: int = Field(64, gt=0, description="公共嵌入宽度 D（全尺寸 256）")
    vision_width: int = Field(32, gt=0, description="视觉骨干第一层通道数")

    # 匹配打分模块 MSB
    msb_layers: int = Field(1, gt=0, description="自注意力层数 L")
    msb_heads: int = Field(4, gt=0, description="注意力头数 H")
    msb_dropout: float = Field(0.0, ge=0.0, lt=1.0, description="MSB dropout")

    # 匹配超参数
    gamma1: float = Field(4.0, gt=0, description="区域注意力的逆温度 γ₁")
    gamma2: float = Field(5.0, gt=0, description="局部匹配 LogSumExp 因子 γ₂")
    gamma3: float = Field(5.0, gt=0, description="视觉-视觉局部匹配 LogSumExp 因子 γ₃")
    margin: float = Field(0.2, gt=0, description="三元组损失间隔 α")
    tau0: float = Field(0.07, gt=0, description="InfoNCE 温度 τ₀")
    hardest_negative: bool = Field(False, description="三元组损失是否只取最难负样本")

    # 生成器
    base_size: int = Field(16, gt=0, description="第 0 阶段分辨率（全尺寸 64）")
    num_stages: int = Field(3, ge=1, description="生成阶段数")
    gen_width: int = Field(32, gt=0, description="生成器隐层宽度 D̂")
    disc_width: int = Field(32, gt=0, description="判别器第一层通道数")
    z_dim: int = Field(32, gt=0, description="噪声维度（全尺寸 100）")
    condition_dim: int = Field(32, gt=0, description="条件增强输出维度 D_c")
    residual_blocks: int = Field(2, gt=0, description="每个细化阶段的残差块数")

    # 损失权重
    lambda1: float = Field(5.0, ge=0, description="L_VVM 权重 λ₁")
    lambda2: float = Field(5.0, ge=0, description="L_VLM 权重 λ₂")
    beta_kl: float = Field(1.0, ge=0, description="条件增强 KL 权重 β")

    # 消融开关
    use_local_level: bool = True
    use_global_level: bool = True
    use_general_level: bool = True
    use_vlm_supervision: bool = True
    use_vvm_supervision: bool = True

    # 优化器
    lr_vlm: float = Field(2e-4, gt=0)
    lr_g: float = Field(1e-4, gt=0)
    lr_d: float = Field(4e-4, gt=0)
    betas_vlm: Tuple[float, float] = (0.9, 0.999)
    betas_gan: Tuple[float, float] = (0.5, 0.999)

    # 预算
    batch_size_vlm: int = Field(16, ge=2)
    batch_size_gan: int = Field(16, ge=2)
    vlm_epochs: int = Field(200, gt=0)
    gan_iterations: int = Field(2000, gt=0)

    # 日志与检查点
    log_every: int = Field(1, gt=0)
    checkpoint_every: int = Field(500, gt=0)

    @field_validator("betas_vlm", "betas_gan")
    @classmethod
    def _check_betas(cls, v):
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1): {v}")
        return v

    @model_validator(mode="after")
    def _check_geometry(self):
        # 初始阶段从 4x4 开始逐次 2 倍上采样
        steps = self.base_size // 4
        if self.base_size % 4 != 0 or steps & (steps - 1) != 0:
            raise ValueError(f"base_size must be 4 * 2^k, got {self.base_size}")
        if self.image_size % 16 != 0:
            raise ValueError(f"final resolution {self.image_size} must be divisible by 16")
        if self.embed_dim % self.msb_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by msb_heads {self.msb_heads}")
        return self

    @property
    def image_size(self) -> int:
        """最终阶段分辨率"""
        return self.base_size * 2 ** (self.num_stages - 1)

    @property
    def region_grid(self) -> int:
        """视觉编码器局部特征网格边长（4 次步长 2 下采样）"""
        return self.image_size // 16

    @property
    def num_regions(self) -> int:
        return self.region_grid ** 2

    @property
    def stage_sizes(self) -> Tuple[int, ...]:
        return tuple(self.base_size * 2 ** i for i in range(self.num_stages))
