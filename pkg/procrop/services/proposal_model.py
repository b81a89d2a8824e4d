"""
裁剪提议模型模块
查询编码器、基于可学习锚框的解码器 Decoder(f_R, f_M) ↦ {(b_n, s_n)}、
匈牙利匹配损失、检查点读写与推理会话
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import paddle
import paddle.nn as nn
import paddle.nn.functional as F
from scipy.optimize import linear_sum_assignment

from ..core.config_manager import ModelConfig
from ..core.exceptions import CheckpointError, DataValidationError, DimensionMismatchError
from ..core.models import CropBox, CropProposal
from ..core.utils import derive_seed
from .embedding_store import EmbeddingCache, EmbeddingIndex, encode, parse_encoder_spec
from .fusion import (
    CrossAttention,
    FusedFeature,
    HashedTextEmbedder,
    QueryFeature,
    RetrievalFusion,
    as_tensor,
    make_linear,
    uniform_attr,
)
from .image_processor import ImageProcessor

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"PCMDL1\x00"
CKPT_VERSION = 1
MIN_EXTENT = 1e-3
STEM_CHANNELS = (16, 32)


class QueryEncoder(nn.Layer):
    """
    查询图像编码器：三个 patchify 卷积块（kernel = stride = 2，总步长 8）
    + 可学习位置编码 + 单层单头自注意力，输出 p = (S/8)² 个 token
    """

    def __init__(self, d_model: int, input_size: int):
        super().__init__()
        self.d_model = d_model
        self.input_size = input_size
        self.grid = input_size // 8
        channels = (3,) + STEM_CHANNELS + (d_model,)
        self.stem = nn.LayerList([
            nn.Conv2D(
                c_in, c_out, kernel_size=2, stride=2,
                weight_attr=uniform_attr(c_in * 4), bias_attr=uniform_attr(c_in * 4),
            )
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ])
        self.position = self.create_parameter(
            shape=[self.grid * self.grid, d_model],
            default_initializer=nn.initializer.Uniform(low=-0.1, high=0.1),
        )
        self.self_attention = CrossAttention(d_model)
        self.norm = nn.LayerNorm(d_model)

    @property
    def p(self) -> int:
        return self.grid * self.grid

    def stem_grid(self, images: paddle.Tensor) -> paddle.Tensor:
        """卷积主干输出 [B, d_model, S/8, S/8]"""
        if images.ndim != 4 or list(images.shape[1:]) != [3, self.input_size, self.input_size]:
            raise DimensionMismatchError(
                f"查询编码器期望输入 [B, 3, {self.input_size}, {self.input_size}]，得到 {list(images.shape)}",
                expected=[3, self.input_size, self.input_size],
                got=list(images.shape),
            )
        x = images
        for i, conv in enumerate(self.stem):
            x = conv(x)
            if i < len(self.stem) - 1:
                x = F.relu(x)
        return x

    def forward(self, images: paddle.Tensor) -> paddle.Tensor:
        grid = self.stem_grid(images)
        tokens = grid.flatten(start_axis=2).transpose([0, 2, 1]) + self.position
        return self.norm(tokens + self.self_attention(tokens, tokens))

    def backbone_parameters(self) -> List[paddle.Tensor]:
        return list(self.stem.parameters())


class DecoderLayer(nn.Layer):
    """锚框查询对融合特征做交叉注意力 + 前馈，均带残差和 LayerNorm"""

    def __init__(self, d_model: int):
        super().__init__()
        self.cross_attention = CrossAttention(d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn_in = make_linear(d_model, 2 * d_model)
        self.ffn_out = make_linear(2 * d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, queries: paddle.Tensor, memory: paddle.Tensor) -> paddle.Tensor:
        queries = self.norm1(queries + self.cross_attention(queries, memory))
        return self.norm2(queries + self.ffn_out(F.relu(self.ffn_in(queries))))


@dataclass
class ModelOutput:
    """解码器输出：角点框 [B,N,4]、中心宽高形式 [B,N,4]、分数 [B,N]"""
    boxes: paddle.Tensor
    cxcywh: paddle.Tensor
    scores: paddle.Tensor


def cxcywh_to_corners(boxes: paddle.Tensor) -> paddle.Tensor:
    """(cx, cy, w, h) → (x1, y1, x2, y2)，裁剪到 [0,1] 并保证最小边长 1e-3"""
    cx, cy, w, h = paddle.unbind(boxes, axis=-1)
    x1 = paddle.clip(cx - w / 2, 0.0, 1.0 - MIN_EXTENT)
    y1 = paddle.clip(cy - h / 2, 0.0, 1.0 - MIN_EXTENT)
    x2 = paddle.minimum(paddle.maximum(cx + w / 2, x1 + MIN_EXTENT), paddle.ones_like(cx))
    y2 = paddle.minimum(paddle.maximum(cy + h / 2, y1 + MIN_EXTENT), paddle.ones_like(cy))
    return paddle.stack([x1, y1, x2, y2], axis=-1)


def initial_anchor_logits(n: int, seed: int) -> np.ndarray:
    """锚框初值：中心 U(0.3,0.7)，宽高 U(0.5,0.9)，取 logit"""
    rng = np.random.default_rng(derive_seed(seed, "anchors"))
    centers = rng.uniform(0.3, 0.7, size=(n, 2))
    sizes = rng.uniform(0.5, 0.9, size=(n, 2))
    boxes = np.concatenate([centers, sizes], axis=1)
    return np.log(boxes / (1.0 - boxes))


class AnchorDecoder(nn.Layer):
    """N 个可学习锚框 + 平行的回归头与分类（美学分数）头"""

    def __init__(self, n_proposals: int, d_model: int, n_layers: int, seed: int = 0):
        super().__init__()
        self.n_proposals = n_proposals
        self.d_model = d_model
        self.anchors = self.create_parameter(
            shape=[n_proposals, 4],
            default_initializer=nn.initializer.Assign(
                initial_anchor_logits(n_proposals, seed).astype(paddle.get_default_dtype())
            ),
        )
        self.anchor_embed = make_linear(4, d_model)
        self.layers = nn.LayerList([DecoderLayer(d_model) for _ in range(n_layers)])
        self.box_head = make_linear(d_model, 4)
        self.score_head = make_linear(d_model, 1)

    def forward(self, memory: paddle.Tensor) -> ModelOutput:
        if memory.shape[-1] != self.d_model:
            raise DimensionMismatchError(
                f"解码器期望特征维度 {self.d_model}，得到 {memory.shape[-1]}",
                expected=self.d_model,
                got=memory.shape[-1],
            )
        batch = int(memory.shape[0])
        anchor_boxes = F.sigmoid(self.anchors)
        queries = self.anchor_embed(anchor_boxes).unsqueeze(0).expand([batch, self.n_proposals, self.d_model])
        for layer in self.layers:
            queries = layer(queries, memory)
        cxcywh = F.sigmoid(self.anchors.unsqueeze(0) + self.box_head(queries))
        scores = F.sigmoid(self.score_head(queries)).squeeze(-1)
        return ModelOutput(boxes=cxcywh_to_corners(cxcywh), cxcywh=cxcywh, scores=scores)


class ProCropModel(nn.Layer):
    """检索增强裁剪模型：查询编码 → 检索融合 (+多模态融合) → 锚框解码"""

    def __init__(self, config: ModelConfig, retrieval_dim: int):
        super().__init__()
        paddle.seed(config.seed)
        self.config = config
        self.retrieval_dim = retrieval_dim
        self.trained_epochs = 0
        self.checkpoint_extra: Dict = {}
        self.encoder = QueryEncoder(config.d_model, config.input_size)
        self.retrieval_fusion = RetrievalFusion(config.fusion_mode, retrieval_dim, config.d_model)
        self.text_fusion: Optional[RetrievalFusion] = None
        if config.use_text:
            self.text_fusion = RetrievalFusion("concat+CA", config.text_dim, config.d_model)
        self.decoder = AnchorDecoder(config.n_proposals, config.d_model, config.decoder_layers, config.seed)

    def encode_query(self, images) -> QueryFeature:
        return QueryFeature(tokens=self.encoder(as_tensor(images)))

    def fuse(self, query: QueryFeature, retrieved=None, text=None) -> Tuple[FusedFeature, Optional[FusedFeature]]:
        external = None
        if self.config.fusion_mode != "none":
            if retrieved is None:
                raise DataValidationError(f"融合方式 {self.config.fusion_mode} 需要检索特征")
            external = as_tensor(retrieved)
        fused_r = self.retrieval_fusion(query.tokens, external)
        fused_m = None
        if self.text_fusion is not None and text is not None:
            fused_m = self.text_fusion(query.tokens, as_tensor(text))
        return fused_r, fused_m

    def decode(self, fused_r: FusedFeature, fused_m: Optional[FusedFeature] = None) -> ModelOutput:
        memory = fused_r.tokens
        if fused_m is not None:
            # 多模态特征沿 token 维拼接在检索特征之后
            memory = paddle.concat([memory, fused_m.tokens], axis=1)
        return self.decoder(memory)

    def forward(self, images, retrieved=None, text=None) -> ModelOutput:
        query = self.encode_query(images)
        fused_r, fused_m = self.fuse(query, retrieved, text)
        return self.decode(fused_r, fused_m)

    def parameter_groups(self) -> List[Dict]:
        """主干卷积使用 0.1 倍学习率（1e-4 → 1e-5）"""
        backbone = self.encoder.backbone_parameters()
        backbone_ids = {id(p) for p in backbone}
        rest = [p for p in self.parameters() if id(p) not in backbone_ids]
        ratio = self.config.backbone_learning_rate / self.config.learning_rate
        return [{"params": rest}, {"params": backbone, "learning_rate": ratio}]


def to_proposals(output: ModelOutput, batch_index: int = 0) -> List[CropProposal]:
    """取出一张图的 N 个提议并按分数降序排列"""
    boxes = output.boxes[batch_index].numpy().astype(np.float64)
    scores = output.scores[batch_index].numpy().astype(np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [CropProposal(box=CropBox(*boxes[i].tolist()), score=float(scores[i])) for i in order]


def decode(model: ProCropModel, fused_r: FusedFeature, fused_m: Optional[FusedFeature] = None) -> List[CropProposal]:
    """单张图的解码：恰好 N 个合法裁剪框，按分数降序"""
    if fused_r.tokens.ndim == 2:
        fused_r = FusedFeature(tokens=fused_r.tokens.unsqueeze(0), segments=fused_r.segments)
    if fused_m is not None and fused_m.tokens.ndim == 2:
        fused_m = FusedFeature(tokens=fused_m.tokens.unsqueeze(0), segments=fused_m.segments)
    with paddle.no_grad():
        return to_proposals(model.decode(fused_r, fused_m))


# ----------------------------------------------------------------------------
# 匈牙利匹配与损失
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    iou: float = 2.0
    score: float = 1.0
    unmatched: float = 0.1

    @classmethod
    def from_config(cls, config: ModelConfig) -> "LossWeights":
        return cls(config.loss_l1, config.loss_iou, config.loss_score, config.unmatched_weight)


@dataclass
class Matching:
    """一对一匹配结果：pred_indices[i] ↔ label_indices[i]"""
    pred_indices: np.ndarray
    label_indices: np.ndarray
    cost: float
    n_proposals: int

    @property
    def unmatched(self) -> np.ndarray:
        mask = np.ones(self.n_proposals, dtype=bool)
        mask[self.pred_indices] = False
        return np.flatnonzero(mask)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a: N×4, b: L×4 → N×L"""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def matching_cost(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    label_boxes: np.ndarray,
    targets: np.ndarray,
    weights: LossWeights,
) -> np.ndarray:
    """cost = λ₁·L1 + λ₂·(1 − IoU) + λ₃·|s − t|，形状 N×L"""
    l1 = np.abs(pred_boxes[:, None, :] - label_boxes[None, :, :]).sum(axis=-1)
    overlap = pairwise_iou(pred_boxes, label_boxes)
    score = np.abs(pred_scores[:, None] - targets[None, :])
    return weights.l1 * l1 + weights.iou * (1.0 - overlap) + weights.score * score


def hungarian_match(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


def _paired_iou(a: paddle.Tensor, b: paddle.Tensor) -> paddle.Tensor:
    iw = paddle.clip(paddle.minimum(a[:, 2], b[:, 2]) - paddle.maximum(a[:, 0], b[:, 0]), min=0.0)
    ih = paddle.clip(paddle.minimum(a[:, 3], b[:, 3]) - paddle.maximum(a[:, 1], b[:, 1]), min=0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter)


def match_and_loss(
    pred_boxes,
    pred_scores,
    labels: Sequence[Tuple[CropBox, float]],
    weights: LossWeights = LossWeights(),
) -> Tuple[paddle.Tensor, Matching]:
    """
    匈牙利一对一匹配后计算损失：
    匹配项代价之和 + 未匹配提议的分数向 0 回归（权重 weights.unmatched）
    """
    if not labels:
        raise DataValidationError("匹配至少需要一个标签")
    pred_boxes = as_tensor(pred_boxes)
    pred_scores = as_tensor(pred_scores)
    label_boxes = np.array([box.to_list() for box, _ in labels], dtype=np.float64)
    targets = np.array([float(t) for _, t in labels], dtype=np.float64)

    cost = matching_cost(
        pred_boxes.numpy().astype(np.float64),
        pred_scores.numpy().astype(np.float64),
        label_boxes,
        targets,
        weights,
    )
    rows, cols = hungarian_match(cost)
    matching = Matching(
        pred_indices=rows,
        label_indices=cols,
        cost=float(cost[rows, cols].sum()),
        n_proposals=int(pred_boxes.shape[0]),
    )

    dtype = pred_boxes.dtype
    matched_boxes = paddle.gather(pred_boxes, paddle.to_tensor(rows), axis=0)
    matched_scores = paddle.gather(pred_scores, paddle.to_tensor(rows), axis=0)
    target_boxes = paddle.to_tensor(label_boxes[cols]).astype(dtype)
    target_scores = paddle.to_tensor(targets[cols]).astype(dtype)

    l1 = paddle.abs(matched_boxes - target_boxes).sum(axis=-1)
    overlap = _paired_iou(matched_boxes, target_boxes)
    score = paddle.abs(matched_scores - target_scores)
    loss = (weights.l1 * l1 + weights.iou * (1.0 - overlap) + weights.score * score).sum()

    unmatched = matching.unmatched
    if len(unmatched) > 0 and weights.unmatched > 0:
        leftover = paddle.gather(pred_scores, paddle.to_tensor(unmatched), axis=0)
        loss = loss + weights.unmatched * paddle.abs(leftover).sum()
    return loss, matching


# ----------------------------------------------------------------------------
# 检查点：magic, u32 头部长度 + JSON 配置快照, u32 张量数, 每个张量
# u16 名称长度 + 名称, u8 维数, u32×维数 形状, float32 数据
# ----------------------------------------------------------------------------

def save_checkpoint(model: ProCropModel, path, extra: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CKPT_VERSION,
        "config": asdict(model.config),
        "retrieval_dim": model.retrieval_dim,
        "trained_epochs": model.trained_epochs,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    try:
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            f.write(struct.pack("<I", len(state)))
            for name in sorted(state):
                array = np.asarray(state[name].numpy(), dtype="<f4")
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", array.ndim))
                f.write(struct.pack(f"<{array.ndim}I", *array.shape))
                f.write(array.tobytes())
    except OSError as e:
        raise CheckpointError(f"检查点写入失败: {e}", path=str(path))
    logger.info(f"检查点已保存: {path}（{len(state)} 个张量, 已训练 {model.trained_epochs} 轮）")
    return path


def read_checkpoint(path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}", path=str(path))
    data = path.read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"检查点 magic 不匹配: {path}", path=str(path))
    try:
        offset = len(CKPT_MAGIC)
        (header_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        if header.get("version") != CKPT_VERSION:
            raise CheckpointError(f"不支持的检查点版本: {header.get('version')}", path=str(path))
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
            offset += 4 * size
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"检查点格式错误: {e}", path=str(path))
    return header, tensors


def load_checkpoint(path) -> ProCropModel:
    header, tensors = read_checkpoint(path)
    config = ModelConfig(**header["config"])
    model = ProCropModel(config, int(header["retrieval_dim"]))
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise CheckpointError(f"检查点缺少参数: {missing[:5]}", path=str(path))
    model.set_state_dict({name: paddle.to_tensor(tensors[name].astype(state[name].numpy().dtype)) for name in state})
    model.trained_epochs = int(header.get("trained_epochs", 0))
    model.checkpoint_extra = dict(header.get("extra", {}))
    model.eval()
    logger.info(f"检查点加载成功: {path}")
    return model


# ----------------------------------------------------------------------------
# 推理会话
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionSession:
    """推理所需的模型、检索库和预处理组件；更换检索库见 embedding_store.swap_index"""
    model: ProCropModel
    index: Optional[EmbeddingIndex]
    k_retrieve: int
    encoder_spec: str
    cache_dir: Optional[str] = None
    image_processor: Optional[ImageProcessor] = None
    text_embedder: Optional[HashedTextEmbedder] = None

    @property
    def retrieval_dim(self) -> int:
        return self.model.retrieval_dim

    @property
    def processor(self) -> ImageProcessor:
        """模型输入预处理；未提供或 input_size 与检查点不一致时按检查点重建"""
        if self.image_processor is not None and self.image_processor.input_size == self.model.config.input_size:
            return self.image_processor
        return ImageProcessor(self.model.config.input_size)

    @property
    def uses_retrieval(self) -> bool:
        return self.model.config.fusion_mode != "none" and self.k_retrieve > 0

    def retrieved_tokens(self, image: np.ndarray, image_id: str = "query", exclude_ids: Sequence[str] = ()) -> Optional[np.ndarray]:
        """K×m×d 检索特征；不使用检索时返回 None"""
        if not self.uses_retrieval:
            return None
        if self.index is None:
            raise DataValidationError(f"融合方式 {self.model.config.fusion_mode} 需要检索库")
        encoder = parse_encoder_spec(self.encoder_spec)
        if self.cache_dir:
            query = EmbeddingCache(self.cache_dir).encode(image, encoder, image_id)
        else:
            query = encode(image, encoder, image_id)
        result = self.index.retrieve(query, self.k_retrieve, exclude_ids=exclude_ids)
        return result.stacked()

    def text_tokens(self, caption: Optional[str]) -> Optional[np.ndarray]:
        if self.model.text_fusion is None:
            return None
        embedder = self.text_embedder or HashedTextEmbedder(self.model.config.text_dim, self.model.config.text_tokens)
        return embedder.embed(caption).tokens


def predict(
    session: PredictionSession,
    image: np.ndarray,
    image_id: str = "query",
    caption: Optional[str] = None,
    exclude_ids: Sequence[str] = (),
) -> List[CropProposal]:
    """检索 → 融合 → 解码 → 按分数排序；第一个即推荐裁剪"""
    processor = session.processor
    model_input = processor.to_model_input(image)[None]
    retrieved = session.retrieved_tokens(image, image_id, exclude_ids)
    text = session.text_tokens(caption)
    session.model.eval()
    with paddle.no_grad():
        output = session.model(
            model_input,
            None if retrieved is None else retrieved[None],
            None if text is None else text[None],
        )
    return to_proposals(output)
