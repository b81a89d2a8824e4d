"""
ProCrop 裁剪助手包 - 检索专业构图参考的美学图像裁剪
"""
__version__ = "0.1.0"
__author__ = "ProCrop Assistant Team"
__description__ = "检索增强的美学图像裁剪与弱监督数据生成工具"

from .core.models import CropBox, CropProposal, AnnotationRecord, EvalReport, WeakPair
from .core.exceptions import (
    ProCropError,
    ConfigurationError,
    DataValidationError,
    ImageLoadError,
    CheckpointError,
    NumericalError,
    ExportError
)

__all__ = [
    "CropBox",
    "CropProposal",
    "AnnotationRecord",
    "EvalReport",
    "WeakPair",
    "ProCropError",
    "ConfigurationError",
    "DataValidationError",
    "ImageLoadError",
    "CheckpointError",
    "NumericalError",
    "ExportError"
]
