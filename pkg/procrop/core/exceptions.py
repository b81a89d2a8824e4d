"""
自定义异常类模块
定义应用程序中使用的各种异常，exit_code 对应命令行退出码
"""
from typing import Optional


class ProCropError(Exception):
    """裁剪助手基础异常类"""
    exit_code = 1


class ConfigurationError(ProCropError):
    """配置错误异常"""
    exit_code = 2

    def __init__(self, message: str, config_key: Optional[str] = None):
        super().__init__(message)
        self.config_key = config_key


class DataValidationError(ProCropError):
    """数据验证错误异常"""
    exit_code = 2

    def __init__(self, message: str, invalid_data=None):
        super().__init__(message)
        self.invalid_data = invalid_data


class InvalidBoxError(DataValidationError):
    """裁剪框不满足 0 ≤ x1 < x2 ≤ 1, 0 ≤ y1 < y2 ≤ 1"""


class DimensionMismatchError(DataValidationError):
    """特征维度不一致异常"""

    def __init__(self, message: str, expected=None, got=None):
        super().__init__(message, invalid_data=got)
        self.expected = expected
        self.got = got


class RefinementError(ProCropError):
    """伪标签迭代精炼异常（例如模型未完成第一阶段训练）"""
    exit_code = 2


class ImageLoadError(ProCropError):
    """图片加载失败异常"""
    exit_code = 3

    def __init__(self, message: str, image_path: Optional[str] = None):
        super().__init__(message)
        self.image_path = image_path


class EmbeddingError(ProCropError):
    """嵌入特征加载失败异常"""
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class IndexFormatError(ProCropError):
    """嵌入缓存/索引文件格式错误异常"""
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class CheckpointError(ProCropError):
    """模型检查点读写错误异常"""
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class ExportError(ProCropError):
    """数据导出错误异常"""
    exit_code = 3

    def __init__(self, message: str, file_path: Optional[str] = None):
        super().__init__(message)
        self.file_path = file_path


class NumericalError(ProCropError):
    """训练中出现 NaN/Inf 损失"""
    exit_code = 4

    def __init__(self, message: str, batch_id: Optional[str] = None):
        super().__init__(message)
        self.batch_id = batch_id
