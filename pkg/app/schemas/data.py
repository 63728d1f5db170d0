from pydantic import BaseModel, ConfigDict, Field


class ToySpec(BaseModel):
    """合成图文数据集的生成参数（合法性在 generate_toy_dataset 中校验）"""
    model_config = ConfigDict(frozen=True)

    n_train: int = Field(500, description="训练集图片数")
    n_test: int = Field(100, description="测试集图片数")
    image_size: int = Field(64, description="图片边长，需被 4 整除")
    seed: int = Field(0, description="随机种子")
