from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from app.core.exceptions import ConfigurationError
from app.schemas.train_config import TrainConfig


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


class ConfigManager:
    """
    运行配置文件管理

    配置文件格式为扁平的 key = value 文本，支持 # 注释与空行；未知 key 直接拒绝。
    """

    def parse_text(self, text: str) -> Dict[str, Any]:
        """解析 key = value 文本，返回原始字符串字典"""
        raw: Dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigurationError(f"line {lineno}: empty key")
            if key in raw:
                raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
            # 元组字段用逗号分隔
            raw[key] = [v.strip() for v in value.split(",")] if "," in value else value
        return raw

    def build(self, raw: Optional[Dict[str, Any]] = None, **overrides) -> TrainConfig:
        """由原始字典 + 覆盖项构造 TrainConfig，未知 key 与非法值统一转为 ConfigurationError"""
        data = dict(raw or {})
        data.update({k: v for k, v in overrides.items() if v is not None})
        unknown = sorted(set(data) - set(TrainConfig.model_fields))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return TrainConfig(**data)
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(x) for x in first.get("loc", ())) or "config"
            raise ConfigurationError(f"{loc}: {first.get('msg')}") from e

    def load(self, path: Optional[Union[str, Path]] = None, **overrides) -> TrainConfig:
        """加载配置文件；path 为空时使用默认配置"""
        raw: Dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigurationError(f"config file not found: {path}")
            raw = self.parse_text(path.read_text(encoding="utf-8"))
        return self.build(raw, **overrides)

    def dump_text(self, config: TrainConfig) -> str:
        lines = [f"{key} = {_format_value(value)}" for key, value in sorted(config.model_dump().items())]
        return "\n".join(lines) + "\n"

    def dump(self, config: TrainConfig, path: Union[str, Path]) -> Path:
        """按稳定顺序写回配置，可被 load 原样读回"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump_text(config), encoding="utf-8")
        return path


# 创建全局配置管理器实例
config_manager = ConfigManager()
