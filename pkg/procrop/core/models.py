"""
裁剪数据模型模块
定义裁剪框、裁剪提议、嵌入记录、弱监督样本和评估报告等数据结构
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .exceptions import DataValidationError, InvalidBoxError


@dataclass(frozen=True)
class CropBox:
    """归一化裁剪框 (x1, y1, x2, y2)，坐标为图像宽高的比例"""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        """数据验证"""
        values = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in values):
            raise InvalidBoxError(f"裁剪框包含非有限值: {values}", invalid_data=values)
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise InvalidBoxError(f"无效的裁剪框: {values}", invalid_data=values)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_cxcywh(self) -> Tuple[float, float, float, float]:
        """转换为中心点-宽高形式（仅用于转换，存储始终使用角点形式）"""
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.width, self.height)

    def aspect_ratio(self, size: "ImageSize") -> float:
        """像素空间宽高比"""
        return (self.width * size.width) / (self.height * size.height)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "CropBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @classmethod
    def from_list(cls, values) -> "CropBox":
        if len(values) != 4:
            raise InvalidBoxError(f"裁剪框需要4个坐标: {values}", invalid_data=values)
        return cls(*(float(v) for v in values))

    @classmethod
    def full(cls) -> "CropBox":
        return cls(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ImageSize:
    """图像尺寸（像素）"""
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataValidationError(f"无效的图像尺寸: {self.width}x{self.height}")

    @classmethod
    def of(cls, image: np.ndarray) -> "ImageSize":
        return cls(width=int(image.shape[1]), height=int(image.shape[0]))


@dataclass(frozen=True)
class CropProposal:
    """裁剪提议：裁剪框 + 美学分数（越高越好）"""
    box: CropBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataValidationError(f"无效的分数: {self.score}", invalid_data=self.score)

    def to_dict(self) -> Dict:
        return {"box": self.box.to_list(), "score": self.score}

    @classmethod
    def from_dict(cls, data: Dict) -> "CropProposal":
        return cls(box=CropBox.from_list(data["box"]), score=float(data["score"]))


@dataclass(frozen=True)
class AnnotatedCandidate:
    """带人工平均意见分 (MOS) 的标注裁剪框"""
    box: CropBox
    mos: float

    def to_dict(self) -> Dict:
        return {"box": self.box.to_list(), "mos": self.mos}


@dataclass
class AnnotationRecord:
    """一张图像的标注行（JSONL 中的一个对象）"""
    image_id: str
    size: ImageSize
    crops: List[AnnotatedCandidate]
    extras: Dict = field(default_factory=dict)  # gt_region / source / seed / caption

    def top_n(self, n: int) -> List[AnnotatedCandidate]:
        """按 MOS 降序取前 N 个，同分按文件中的顺序"""
        order = sorted(range(len(self.crops)), key=lambda i: (-self.crops[i].mos, i))
        return [self.crops[i] for i in order[:n]]

    @property
    def caption(self) -> Optional[str]:
        return self.extras.get("caption")

    def to_dict(self) -> Dict:
        row = {
            "id": self.image_id,
            "width": self.size.width,
            "height": self.size.height,
            "crops": [c.to_dict() for c in self.crops],
        }
        row.update(self.extras)
        return row

    @classmethod
    def from_dict(cls, data: Dict) -> "AnnotationRecord":
        try:
            crops = [
                AnnotatedCandidate(box=CropBox.from_list(c["box"]), mos=float(c["mos"]))
                for c in data["crops"]
            ]
            extras = {k: v for k, v in data.items() if k not in ("id", "width", "height", "crops")}
            return cls(
                image_id=str(data["id"]),
                size=ImageSize(int(data["width"]), int(data["height"])),
                crops=crops,
                extras=extras,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(f"无效的标注行: {e}", invalid_data=data)


@dataclass
class EmbeddingRecord:
    """单张图像的构图特征：m×d 的 token 矩阵及其均值池化单位向量"""
    image_id: str
    tokens: np.ndarray
    pooled: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
            raise DataValidationError(f"无效的 token 形状: {tokens.shape}", invalid_data=self.image_id)
        if not np.all(np.isfinite(tokens)):
            raise DataValidationError(f"token 包含非有限值: {self.image_id}", invalid_data=self.image_id)
        self.tokens = tokens
        self.pooled = pool_tokens(tokens)

    @property
    def m(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def d(self) -> int:
        return int(self.tokens.shape[1])


def pool_tokens(tokens: np.ndarray) -> np.ndarray:
    """行均值后做 L2 归一化；全零时返回均匀单位向量"""
    mean = tokens.astype(np.float64).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm <= 1e-12:
        return np.full(tokens.shape[1], 1.0 / math.sqrt(tokens.shape[1]))
    return mean / norm


@dataclass(frozen=True)
class Neighbor:
    """检索到的近邻"""
    image_id: str
    similarity: float
    tokens: np.ndarray


@dataclass
class RetrievalResult:
    """top-K 检索结果，按 (-相似度, image_id) 排序"""
    neighbors: List[Neighbor]

    @property
    def k(self) -> int:
        return len(self.neighbors)

    @property
    def ids(self) -> List[str]:
        return [n.image_id for n in self.neighbors]

    @property
    def similarities(self) -> List[float]:
        return [n.similarity for n in self.neighbors]

    def stacked(self) -> np.ndarray:
        """K×m×d 张量 R"""
        if not self.neighbors:
            raise DataValidationError("空的检索结果")
        return np.stack([n.tokens for n in self.neighbors], axis=0)


@dataclass(frozen=True)
class MultiModalEmbedding:
    """多模态（文字描述）嵌入 M ∈ R^{m'×d}"""
    tokens: np.ndarray
    caption: str = ""

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DataValidationError(f"无效的多模态嵌入形状: {self.tokens.shape}")


@dataclass(frozen=True)
class Provenance:
    """弱监督样本来源"""
    source_id: str
    seed: int


@dataclass
class WeakPair:
    """扩展画布 + 原图所在区域 + 伪标签集合"""
    pair_id: str
    canvas: np.ndarray
    gt_region: CropBox
    pseudo_labels: List[CropProposal]
    provenance: Provenance

    @property
    def size(self) -> ImageSize:
        return ImageSize.of(self.canvas)

    def to_annotation(self) -> AnnotationRecord:
        """伪标签分数充当 MOS，写成评估模块使用的标注格式"""
        size = self.size
        return AnnotationRecord(
            image_id=self.pair_id,
            size=size,
            crops=[AnnotatedCandidate(box=p.box, mos=p.score) for p in self.pseudo_labels],
            extras={
                "gt_region": self.gt_region.to_list(),
                "source": self.provenance.source_id,
                "seed": self.provenance.seed,
            },
        )


@dataclass
class EvalReport:
    """数据集级评估报告"""
    acc: Dict[Tuple[int, int], float]
    mean_acc: Dict[int, float]
    iou: Dict[int, float]
    disp: Dict[int, float]
    rows: List[Dict] = field(default_factory=list)
    eps: float = 0.85

    def __post_init__(self):
        for key, value in list(self.acc.items()) + list(self.mean_acc.items()):
            if not 0.0 <= value <= 1.0:
                raise DataValidationError(f"准确率超出 [0,1]: {key}={value}")

    def to_dict(self) -> Dict:
        return {
            "eps": self.eps,
            "acc": {f"{k}/{n}": v for (k, n), v in sorted(self.acc.items())},
            "mean_acc": {str(n): v for n, v in sorted(self.mean_acc.items())},
            "iou": {str(i): v for i, v in sorted(self.iou.items())},
            "disp": {str(i): v for i, v in sorted(self.disp.items())},
            "rows": self.rows,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EvalReport":
        acc = {}
        for key, value in data.get("acc", {}).items():
            k, n = key.split("/")
            acc[(int(k), int(n))] = float(value)
        return cls(
            acc=acc,
            mean_acc={int(n): float(v) for n, v in data.get("mean_acc", {}).items()},
            iou={int(i): float(v) for i, v in data.get("iou", {}).items()},
            disp={int(i): float(v) for i, v in data.get("disp", {}).items()},
            rows=list(data.get("rows", [])),
            eps=float(data.get("eps", 0.85)),
        )
