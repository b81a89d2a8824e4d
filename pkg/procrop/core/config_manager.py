"""
配置管理模块
负责运行配置的读取、校验、序列化和哈希
"""
import configparser
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from .exceptions import ConfigurationError
from .utils import canonical_hash

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "PROCROP_CACHE"
FUSION_MODES = ("none", "concat", "concat+CA")
SIMILARITY_MODES = ("pooled", "token")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass(frozen=True)
class Option:
    """一个配置项：类型、默认值、取值约束"""
    kind: str  # int / float / str / bool / choice
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    expected: str = ""
    choices: Tuple[str, ...] = ()


def _positive(v) -> bool:
    return v >= 1


def _non_negative(v) -> bool:
    return v >= 0


def _open_unit(v) -> bool:
    return 0.0 < v < 1.0


SCHEMA: Dict[str, Dict[str, Option]] = {
    "run": {
        "seed": Option("int", 0, _non_negative, ">= 0"),
        "cache_dir": Option("str", ".procrop_cache"),
        "workers": Option("int", 1, _positive, ">= 1"),
    },
    "logging": {
        "level": Option("choice", "INFO", choices=LOG_LEVELS),
        "file_path": Option("str", "logs/procrop.log"),
        "max_file_size": Option("int", 10485760, _positive, ">= 1"),  # 10MB
        "backup_count": Option("int", 5, _non_negative, ">= 0"),
    },
    "retrieval": {
        "encoder": Option("str", "line-hist:8,8"),
        "similarity": Option("choice", "pooled", choices=SIMILARITY_MODES),
        "exclude_self": Option("bool", False),
    },
    "fusion": {
        "mode": Option("choice", "concat+CA", choices=FUSION_MODES),
        "d_model": Option("int", 64, _positive, ">= 1"),
        "k_retrieve": Option("int", 10, _non_negative, ">= 0"),
        "use_text": Option("bool", False),
        "text_tokens": Option("int", 16, _positive, ">= 1"),
        "text_dim": Option("int", 32, _positive, ">= 1"),
    },
    "model": {
        "n_proposals": Option("int", 90, _positive, ">= 1"),
        "decoder_layers": Option("int", 2, _positive, ">= 1"),
        "n_heads": Option("int", 1, lambda v: v == 1, "== 1 (single-head attention)"),
        "input_size": Option("int", 64, lambda v: v >= 8 and v % 8 == 0, "multiple of 8, >= 8"),
        "learning_rate": Option("float", 1e-4, lambda v: v > 0, "> 0"),
        "backbone_learning_rate": Option("float", 1e-5, lambda v: v > 0, "> 0"),
        "weight_decay": Option("float", 1e-4, lambda v: v >= 0, ">= 0"),
        "epochs": Option("int", 500, _positive, ">= 1"),
        "stage1_epochs": Option("int", 100, _non_negative, ">= 0"),
        "batch_size": Option("int", 16, _positive, ">= 1"),
        "loss_l1": Option("float", 5.0, lambda v: v >= 0, ">= 0"),
        "loss_iou": Option("float", 2.0, lambda v: v >= 0, ">= 0"),
        "loss_score": Option("float", 1.0, lambda v: v >= 0, ">= 0"),
        "unmatched_weight": Option("float", 0.1, lambda v: v >= 0, ">= 0"),
    },
    "weakgen": {
        "canvas_min": Option("int", 256, lambda v: v >= 16, ">= 16"),
        "canvas_max": Option("int", 384, lambda v: v >= 16, ">= 16"),
        "area_min": Option("float", 0.4, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
        "area_max": Option("float", 0.8, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
        "canvases_per_source": Option("int", 2, _positive, ">= 1"),
        "crops_per_pair": Option("int", 2, _positive, ">= 1"),
        "blur_sigma": Option("float", 4.0, lambda v: v > 0, "> 0"),
        "noise_std": Option("float", 3.0, lambda v: v >= 0, ">= 0"),
        "labels_per_image": Option("int", 8, _positive, ">= 1"),
        "diversity_iou": Option("float", 0.8, _open_unit, "in (0, 1)"),
        "rounds": Option("int", 1, _non_negative, ">= 0"),
    },
    "evaluation": {
        "eps": Option("float", 0.85, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
    },
}


@dataclass(frozen=True)
class RunSettings:
    seed: int
    cache_dir: str
    workers: int


@dataclass(frozen=True)
class LoggingSettings:
    level: str
    file_path: str
    max_file_size: int
    backup_count: int


@dataclass(frozen=True)
class RetrievalSettings:
    encoder: str
    similarity: str
    exclude_self: bool


@dataclass(frozen=True)
class FusionSettings:
    mode: str
    d_model: int
    k_retrieve: int
    use_text: bool
    text_tokens: int
    text_dim: int


@dataclass(frozen=True)
class ModelConfig:
    """模型与训练超参数"""
    n_proposals: int = 90
    d_model: int = 64
    decoder_layers: int = 2
    n_heads: int = 1
    input_size: int = 64
    learning_rate: float = 1e-4
    backbone_learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 500
    stage1_epochs: int = 100
    batch_size: int = 16
    loss_l1: float = 5.0
    loss_iou: float = 2.0
    loss_score: float = 1.0
    unmatched_weight: float = 0.1
    seed: int = 0
    fusion_mode: str = "concat+CA"
    k_retrieve: int = 10
    use_text: bool = False
    text_tokens: int = 16
    text_dim: int = 32

    def __post_init__(self):
        if self.n_proposals < 1:
            raise ConfigurationError("model.n_proposals 必须 >= 1", config_key="model.n_proposals")
        if self.stage1_epochs > self.epochs:
            raise ConfigurationError(
                f"model.stage1_epochs ({self.stage1_epochs}) 不能大于 model.epochs ({self.epochs})",
                config_key="model.stage1_epochs",
            )
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(
                f"fusion.mode 必须是 {FUSION_MODES} 之一，得到 {self.fusion_mode!r}",
                config_key="fusion.mode",
            )
        if self.fusion_mode != "none" and self.k_retrieve < 1:
            raise ConfigurationError(
                f"融合方式 {self.fusion_mode} 需要 fusion.k_retrieve >= 1（K=0 请使用 fusion.mode = none）",
                config_key="fusion.k_retrieve",
            )

    @property
    def uses_retrieval(self) -> bool:
        return self.fusion_mode != "none" and self.k_retrieve > 0


@dataclass(frozen=True)
class RefineConfig:
    """弱监督数据生成与伪标签精炼配置"""
    rounds: int = 1
    labels_per_image: int = 8
    diversity_iou: float = 0.8
    canvas_min: int = 256
    canvas_max: int = 384
    area_min: float = 0.4
    area_max: float = 0.8
    canvases_per_source: int = 2
    crops_per_pair: int = 2
    blur_sigma: float = 4.0
    noise_std: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.diversity_iou < 1.0:
            raise ConfigurationError("weakgen.diversity_iou 必须在 (0, 1) 内", config_key="weakgen.diversity_iou")
        if self.labels_per_image < 1:
            raise ConfigurationError("weakgen.labels_per_image 必须 >= 1", config_key="weakgen.labels_per_image")
        if self.canvas_min > self.canvas_max:
            raise ConfigurationError("weakgen.canvas_min 不能大于 weakgen.canvas_max", config_key="weakgen.canvas_min")
        if self.area_min > self.area_max:
            raise ConfigurationError("weakgen.area_min 不能大于 weakgen.area_max", config_key="weakgen.area_min")


@dataclass(frozen=True)
class EvaluationSettings:
    eps: float


@dataclass(frozen=True)
class RunConfig:
    """整次运行的配置树"""
    values: Mapping[str, Mapping[str, Any]]
    run: RunSettings
    logging: LoggingSettings
    retrieval: RetrievalSettings
    fusion: FusionSettings
    model: ModelConfig
    weakgen: RefineConfig
    evaluation: EvaluationSettings

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {section: dict(options) for section, options in self.values.items()}

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        values = self.to_dict()
        for dotted, value in overrides.items():
            section, option = _split_key(dotted)
            values[section][option] = _convert(section, option, str(value))
        return build_run_config(values)


def _split_key(dotted: str) -> Tuple[str, str]:
    if "." not in dotted:
        raise ConfigurationError(f"配置键需要 section.option 形式: {dotted}", config_key=dotted)
    section, option = dotted.split(".", 1)
    if section not in SCHEMA or option not in SCHEMA[section]:
        raise ConfigurationError(f"未知的配置键: {dotted}", config_key=dotted)
    return section, option


def _convert(section: str, option: str, raw: str) -> Any:
    """把字符串值转换为 schema 声明的类型并校验范围"""
    key = f"{section}.{option}"
    spec = SCHEMA[section][option]
    text = raw.strip().strip('"').strip("'")
    try:
        if spec.kind == "int":
            value: Any = int(text)
        elif spec.kind == "float":
            value = float(text)
        elif spec.kind == "bool":
            lowered = text.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            value = configparser.ConfigParser.BOOLEAN_STATES[lowered]
        else:
            value = text
    except ValueError:
        raise ConfigurationError(f"{key} 需要 {spec.kind} 类型，得到 {raw!r}", config_key=key)
    if spec.kind == "choice" and value not in spec.choices:
        raise ConfigurationError(f"{key} 必须是 {list(spec.choices)} 之一，得到 {value!r}", config_key=key)
    if spec.check is not None and not spec.check(value):
        raise ConfigurationError(f"{key} 取值超出范围（期望 {spec.expected}），得到 {value!r}", config_key=key)
    return value


def default_values() -> Dict[str, Dict[str, Any]]:
    return {section: {name: opt.default for name, opt in options.items()} for section, options in SCHEMA.items()}


def build_run_config(values: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    """由已校验的分节取值构建配置树"""
    v = {section: dict(values[section]) for section in SCHEMA}
    fusion = FusionSettings(**v["fusion"])
    model = ModelConfig(
        d_model=fusion.d_model,
        seed=v["run"]["seed"],
        fusion_mode=fusion.mode,
        k_retrieve=fusion.k_retrieve,
        use_text=fusion.use_text,
        text_tokens=fusion.text_tokens,
        text_dim=fusion.text_dim,
        **v["model"],
    )
    return RunConfig(
        values=v,
        run=RunSettings(**v["run"]),
        logging=LoggingSettings(**v["logging"]),
        retrieval=RetrievalSettings(**v["retrieval"]),
        fusion=fusion,
        model=model,
        weakgen=RefineConfig(**v["weakgen"]),
        evaluation=EvaluationSettings(**v["evaluation"]),
    )


class ConfigManager:
    """配置管理器类"""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = config_file
        self.config = configparser.ConfigParser()
        self.logger = logging.getLogger(__name__)

        # 创建默认配置
        self._create_default_config()

        # 加载配置文件
        if config_file is not None:
            self._load_config()

    def _create_default_config(self):
        """创建默认配置"""
        for section, options in default_values().items():
            self.config.add_section(section)
            for name, value in options.items():
                self.config.set(section, name, _format_value(value))

    def _load_config(self):
        """加载配置文件，未知的节或键直接报错"""
        path = Path(self.config_file)
        if not path.exists():
            raise FileNotFoundError(f"配置文件不存在: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigurationError(f"配置文件解析失败: {e}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigurationError(f"未知的配置节: [{section}]", config_key=section)
            for name, raw in parser.items(section):
                if name not in SCHEMA[section]:
                    raise ConfigurationError(f"未知的配置键: {section}.{name}", config_key=f"{section}.{name}")
                _convert(section, name, raw)
                self.config.set(section, name, raw.strip().strip('"').strip("'"))
        self.logger.info(f"配置文件加载成功: {path}")

    def get(self, section: str, option: str, fallback: Any = None) -> str:
        """获取配置值"""
        try:
            return self.config.get(section, option, fallback=fallback)
        except (configparser.NoSectionError, configparser.NoOptionError):
            return fallback

    def set(self, section: str, option: str, value: Any):
        """设置配置值（带校验）"""
        _split_key(f"{section}.{option}")
        _convert(section, option, str(value))
        self.config.set(section, option, _format_value(value))

    def run_config(self, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
        """得到校验过的配置树；环境变量 PROCROP_CACHE 覆盖缓存目录"""
        values: Dict[str, Dict[str, Any]] = {}
        for section, options in SCHEMA.items():
            values[section] = {name: _convert(section, name, self.config.get(section, name)) for name in options}
        cache_override = os.environ.get(CACHE_ENV_VAR)
        if cache_override:
            values["run"]["cache_dir"] = cache_override
        for dotted, value in (overrides or {}).items():
            section, option = _split_key(dotted)
            values[section][option] = _convert(section, option, str(value))
        return build_run_config(values)

    def dump(self) -> str:
        """序列化为 INI 文本"""
        buffer = io.StringIO()
        self.config.write(buffer)
        return buffer.getvalue()

    def save_config(self, path: Optional[str] = None):
        """保存配置到文件"""
        target = Path(path or self.config_file or "procrop.ini")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.dump(), encoding="utf-8")
        self.logger.info(f"配置文件保存成功: {target}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """读取配置文件（可为空）并补全默认值"""
    return ConfigManager(path).run_config(overrides)


def dump_config(config: RunConfig) -> str:
    """把配置树写回 INI 文本"""
    manager = ConfigManager()
    for section, options in config.to_dict().items():
        for name, value in options.items():
            manager.config.set(section, name, _format_value(value))
    return manager.dump()
