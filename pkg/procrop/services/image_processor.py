"""
图像处理模块
负责图像加载、模型输入预处理、裁剪提取和裁剪结果叠加绘制
"""
import logging
import os
import shutil
from pathlib import Path
from typing import List, Sequence, Tuple

import cv2
import numpy as np
from PIL import Image, ImageDraw

from ..core.exceptions import ExportError, ImageLoadError
from ..core.geometry import to_pixels
from ..core.models import CropBox, CropProposal, ImageSize

logger = logging.getLogger(__name__)

# 排名对应的颜色 (RGB)，第 1 名为红色
RANK_COLORS: Tuple[Tuple[int, int, int], ...] = (
    (255, 0, 0),
    (0, 200, 0),
    (0, 0, 255),
    (255, 165, 0),
    (160, 32, 240),
    (0, 200, 200),
)


def rank_color(rank: int) -> Tuple[int, int, int]:
    """rank 从 0 开始"""
    return RANK_COLORS[rank % len(RANK_COLORS)]


class ImageProcessor:
    """图像处理器类"""

    def __init__(self, input_size: int = 64):
        self.input_size = input_size
        self.logger = logging.getLogger(__name__)

    def load_image(self, image_path) -> np.ndarray:
        """加载图片并返回 BGR numpy 数组"""
        image_path = str(image_path)
        if not os.path.exists(image_path):
            raise ImageLoadError(f"图片文件不存在: {image_path}", image_path=image_path)
        if os.path.getsize(image_path) == 0:
            raise ImageLoadError(f"图片文件为空: {image_path}", image_path=image_path)

        # 使用cv2.IMREAD_COLOR确保加载彩色图像
        image = cv2.imread(image_path, cv2.IMREAD_COLOR)
        if image is None:
            raise ImageLoadError(f"无法加载图片，可能是不支持的格式: {image_path}", image_path=image_path)

        self.logger.debug(f"成功加载图片: {image_path}, 尺寸: {image.shape}")
        return image

    def save_image(self, image: np.ndarray, out_path) -> Path:
        """无损保存为 PNG 等格式"""
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(out_path), image):
            raise ExportError(f"图片写入失败: {out_path}", file_path=str(out_path))
        return out_path

    def to_model_input(self, image: np.ndarray) -> np.ndarray:
        """
        模型输入预处理:
        1. 缩放到 input_size × input_size
        2. BGR 转 RGB，归一化到 [0, 1]
        3. HWC 转 CHW
        """
        if image is None or image.size == 0:
            raise ImageLoadError("空图像无法送入模型")
        if image.ndim == 2:
            image = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)
        resized = cv2.resize(image, (self.input_size, self.input_size), interpolation=cv2.INTER_AREA)
        rgb = cv2.cvtColor(resized, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
        return np.ascontiguousarray(rgb.transpose(2, 0, 1))

    def extract_crop(self, image: np.ndarray, box: CropBox) -> np.ndarray:
        """提取裁剪区域图像"""
        x1, y1, x2, y2 = to_pixels(box, ImageSize.of(image))
        return image[y1:y2, x1:x2].copy()

    def render_overlay(
        self,
        image_path,
        proposals: Sequence[CropProposal],
        out_path,
        topk: int = 3,
    ) -> Path:
        """
        把前 topk 个裁剪提议按排名着色绘制到图上并无损保存
        没有提议时原样复制图片
        """
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        shown: List[CropProposal] = list(proposals)[:topk]
        try:
            if not shown:
                shutil.copyfile(str(image_path), str(out_path))
                return out_path

            image = self.load_image(image_path)
            canvas = Image.fromarray(cv2.cvtColor(image, cv2.COLOR_BGR2RGB))
            draw = ImageDraw.Draw(canvas)
            size = ImageSize.of(image)
            line_width = max(1, min(size.width, size.height) // 200)

            # 倒序绘制，第 1 名最后画在最上层
            for rank in reversed(range(len(shown))):
                proposal = shown[rank]
                x1, y1, x2, y2 = to_pixels(proposal.box, size)
                color = rank_color(rank)
                draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=color, width=line_width)
                draw.text((x1 + line_width + 2, y1 + line_width + 2), f"#{rank + 1} {proposal.score:.2f}", fill=color)

            canvas.save(str(out_path), format="PNG")
        except OSError as e:
            raise ExportError(f"叠加图写入失败: {e}", file_path=str(out_path))

        self.logger.info(f"叠加图已保存: {out_path}（{len(shown)} 个裁剪框）")
        return out_path
