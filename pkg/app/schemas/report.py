import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator

# LossReport 中各项的输出顺序
_LOSS_ORDER = ("L_local", "L_global", "L_general", "L_VLM", "L_VG", "L_VL", "L_VGEN", "L_VVM", "kl")


def _fmt(value: float) -> str:
    return f"{value:.6g}"


class LossReport(BaseModel):
    """一个日志步的损失快照，按行写入指标日志"""
    L_local: Optional[float] = Field(None, description="局部级三元组损失")
    L_global: Optional[float] = Field(None, description="全局级三元组损失")
    L_general: Optional[float] = Field(None, description="MSB 级三元组损失")
    L_VLM: Optional[float] = Field(None, description="L_local + L_global + L_general")
    L_VG: Optional[float] = Field(None, description="视觉-视觉全局 InfoNCE")
    L_VL: Optional[float] = Field(None, description="视觉-视觉局部 InfoNCE")
    L_VGEN: Optional[float] = Field(None, description="MSB 得分差的平方")
    L_VVM: Optional[float] = Field(None, description="L_VG + L_VL + L_VGEN")
    kl: Optional[float] = Field(None, description="条件增强 KL")
    L_G_adv: List[float] = Field(default_factory=list, description="各阶段生成器对抗损失")
    L_D: List[float] = Field(default_factory=list, description="各阶段判别器损失")
    L_total: Optional[float] = Field(None, description="本步优化的总损失")

    @field_validator("*")
    @classmethod
    def _finite(cls, v, info):
        values = v if isinstance(v, list) else [v]
        for x in values:
            if x is not None and not math.isfinite(x):
                raise ValueError(f"{info.field_name} is not finite: {x}")
        return v

    def as_dict(self) -> Dict[str, float]:
        """展开为扁平字典，阶段损失记为 L_G0 / L_D0 ..."""
        flat: Dict[str, float] = {}
        for key in _LOSS_ORDER:
            value = getattr(self, key)
            if value is not None:
                flat[key] = value
        for i, value in enumerate(self.L_G_adv):
            flat[f"L_G{i}"] = value
        for i, value in enumerate(self.L_D):
            flat[f"L_D{i}"] = value
        if self.L_total is not None:
            flat["L_total"] = self.L_total
        return flat

    def to_log_line(self, iteration: int) -> str:
        return " ".join([f"iter={iteration}"] + [f"{k}={_fmt(v)}" for k, v in self.as_dict().items()])


def parse_log_line(line: str) -> Dict[str, float]:
    """to_log_line 的逆：返回包含 iter 的扁平字典"""
    out: Dict[str, float] = {}
    for part in line.split():
        key, _, value = part.partition("=")
        out[key] = int(value) if key == "iter" else float(value)
    return out


class MetricReport(BaseModel):
    """评价报告，键集合固定"""
    vlms_mean: float = Field(..., description="VLMS 均值")
    vlms_std: float = Field(..., description="VLMS 标准差")
    is_mean: float = Field(..., description="IS 在各划分上的均值")
    is_std: float = Field(..., description="IS 在各划分上的标准差")
    fid: float = Field(..., description="FID")
    r_precision_mean: float = Field(..., description="R-precision 均值")
    r_precision_std: float = Field(..., description="R-precision 标准差")
    n_samples: int = Field(..., description="参与评价的生成图片数")


class ProbeRow(BaseModel):
    """VLMS 探针表中的一行"""
    probe: str = Field(..., description="探针类别：ground_truth / random / noise / mask / replace / stopwords")
    level: Optional[float] = Field(None, description="噪声 σ 或掩码比例")
    vlms_mean: float
    vlms_std: float
    n: int
