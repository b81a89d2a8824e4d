"""
测试公共夹具：合成图像、随机裁剪框、小规模模型配置
"""
import json

import cv2
import numpy as np
import paddle
import pytest

from procrop.core.config_manager import ModelConfig, RefineConfig
from procrop.core.models import AnnotatedCandidate, AnnotationRecord, CropBox, EmbeddingRecord, ImageSize


def random_box(rng: np.random.Generator, min_extent: float = 0.05) -> CropBox:
    """均匀随机的合法裁剪框"""
    while True:
        x1, x2 = np.sort(rng.uniform(0, 1, 2))
        y1, y2 = np.sort(rng.uniform(0, 1, 2))
        if x2 - x1 >= min_extent and y2 - y1 >= min_extent:
            return CropBox(float(x1), float(y1), float(x2), float(y2))


def step_image(size: int = 64, edge_col: int = 32, low: int = 0, high: int = 255) -> np.ndarray:
    """左暗右亮的竖直边缘图 (BGR)"""
    image = np.full((size, size, 3), low, dtype=np.uint8)
    image[:, edge_col:] = high
    return image


def make_record(image_id: str, crops, width: int = 100, height: int = 100, **extras) -> AnnotationRecord:
    return AnnotationRecord(
        image_id=image_id,
        size=ImageSize(width, height),
        crops=[AnnotatedCandidate(box=CropBox(*box), mos=mos) for box, mos in crops],
        extras=dict(extras),
    )


def textured_image(rng: np.random.Generator, height: int = 48, width: int = 48) -> np.ndarray:
    """带几条随机直线的合成“专业图像”"""
    image = np.full((height, width, 3), 40, dtype=np.uint8)
    for _ in range(4):
        p1 = tuple(int(v) for v in rng.integers(0, [width, height]))
        p2 = tuple(int(v) for v in rng.integers(0, [width, height]))
        color = tuple(int(c) for c in rng.integers(80, 255, 3))
        cv2.line(image, p1, p2, color, 2)
    return image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64_paddle():
    """双精度默认类型（梯度检查用）"""
    previous = paddle.get_default_dtype()
    paddle.set_default_dtype("float64")
    yield
    paddle.set_default_dtype(previous)


@pytest.fixture
def tiny_model_config():
    """p=4（16×16 输入）、d_model=8、N=3"""
    return ModelConfig(
        n_proposals=3,
        d_model=8,
        decoder_layers=1,
        input_size=16,
        epochs=2,
        stage1_epochs=1,
        batch_size=2,
        fusion_mode="concat+CA",
        k_retrieve=2,
        seed=7,
    )


@pytest.fixture
def small_refine_config():
    return RefineConfig(
        canvas_min=64,
        canvas_max=96,
        area_min=0.4,
        area_max=0.8,
        canvases_per_source=2,
        crops_per_pair=2,
        blur_sigma=2.0,
        noise_std=2.0,
        labels_per_image=8,
        diversity_iou=0.8,
    )


@pytest.fixture
def toy_records(rng):
    """10 条 4×8 的随机嵌入记录"""
    return [EmbeddingRecord(image_id=f"ref{i:02d}", tokens=rng.random((4, 8))) for i in range(10)]


@pytest.fixture
def write_config(tmp_path):
    """写一个最小 INI 配置（日志写到临时目录）"""

    def _write(sections=None):
        sections = dict(sections or {})
        sections.setdefault("logging", {}).setdefault("file_path", str(tmp_path / "logs" / "procrop.log"))
        sections.setdefault("run", {}).setdefault("cache_dir", str(tmp_path / "cache"))
        lines = []
        for section, options in sections.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in options.items())
            lines.append("")
        path = tmp_path / "procrop.ini"
        path.write_text("\n".join(lines), encoding="utf-8")
        return path

    return _write


def read_json_lines(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
