"""
裁剪框几何运算模块
IoU、边界位移 (Disp)、包含关系、像素坐标换算和坐标系变换
"""
from typing import Tuple

from .exceptions import InvalidBoxError
from .models import CropBox, ImageSize


def _check(box: CropBox) -> None:
    if not isinstance(box, CropBox):
        raise InvalidBoxError(f"需要 CropBox，得到 {type(box).__name__}", invalid_data=box)


def intersection_area(a: CropBox, b: CropBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: CropBox, b: CropBox) -> float:
    """交并比 |a∩b| / |a∪b|"""
    _check(a)
    _check(b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def disp(a: CropBox, b: CropBox) -> float:
    """四条边归一化偏移绝对值的均值"""
    _check(a)
    _check(b)
    return (abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2)) / 4


def contains(outer: CropBox, inner: CropBox) -> bool:
    """inner 是否完全位于 outer 内（闭区间）"""
    _check(outer)
    _check(inner)
    return (
        outer.x1 <= inner.x1
        and outer.y1 <= inner.y1
        and inner.x2 <= outer.x2
        and inner.y2 <= outer.y2
    )


def to_pixels(box: CropBox, size: ImageSize) -> Tuple[int, int, int, int]:
    """换算为像素矩形 (x1, y1, x2, y2)，四舍五入后宽高至少为 1"""
    _check(box)
    x1 = int(round(box.x1 * size.width))
    y1 = int(round(box.y1 * size.height))
    x2 = int(round(box.x2 * size.width))
    y2 = int(round(box.y2 * size.height))
    if x2 - x1 < 1:
        x1 = min(x1, size.width - 1)
        x2 = x1 + 1
    if y2 - y1 < 1:
        y1 = min(y1, size.height - 1)
        y2 = y1 + 1
    return x1, y1, x2, y2


def reframe(box: CropBox, frame: CropBox) -> CropBox:
    """把 box 从画布坐标系换算到 frame（画布上的一个裁剪）的坐标系中"""
    _check(box)
    _check(frame)
    return CropBox(
        _clamp01((box.x1 - frame.x1) / frame.width),
        _clamp01((box.y1 - frame.y1) / frame.height),
        _clamp01((box.x2 - frame.x1) / frame.width),
        _clamp01((box.y2 - frame.y1) / frame.height),
    )


def unframe(box: CropBox, frame: CropBox) -> CropBox:
    """reframe 的逆变换：frame 坐标系 → 画布坐标系"""
    return CropBox(
        _clamp01(frame.x1 + box.x1 * frame.width),
        _clamp01(frame.y1 + box.y1 * frame.height),
        _clamp01(frame.x1 + box.x2 * frame.width),
        _clamp01(frame.y1 + box.y2 * frame.height),
    )


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))
