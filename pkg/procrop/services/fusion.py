"""
特征融合模块
检索融合 f_R = Concat(f̄_I, Π(R), f_c) 与多模态融合 f_M = Concat(f̄_I, Π'(M), f'_c)，
以及消融用的 none / concat / concat+CA 三种对齐方式
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import paddle
import paddle.nn as nn
import paddle.nn.functional as F

from ..core.config_manager import FUSION_MODES
from ..core.exceptions import DataValidationError, DimensionMismatchError
from ..core.models import MultiModalEmbedding, RetrievalResult
from ..core.utils import tokenize_caption

logger = logging.getLogger(__name__)

TensorLike = Union[paddle.Tensor, np.ndarray]


def uniform_attr(fan_in: int) -> paddle.ParamAttr:
    """U(-1/√fan_in, 1/√fan_in) 初始化"""
    bound = 1.0 / math.sqrt(fan_in)
    return paddle.ParamAttr(initializer=nn.initializer.Uniform(low=-bound, high=bound))


def make_linear(in_features: int, out_features: int) -> nn.Linear:
    return nn.Linear(
        in_features,
        out_features,
        weight_attr=uniform_attr(in_features),
        bias_attr=uniform_attr(in_features),
    )


def as_tensor(value: TensorLike) -> paddle.Tensor:
    if isinstance(value, paddle.Tensor):
        return value
    return paddle.to_tensor(np.asarray(value, dtype=paddle.get_default_dtype()))


@dataclass
class QueryFeature:
    """查询图像特征 f̄_I，形状 [B, p, d_model]"""
    tokens: paddle.Tensor

    @property
    def p(self) -> int:
        return int(self.tokens.shape[-2])


@dataclass
class FusedFeature:
    """融合后的 token 序列及各段的 [start, end) 边界"""
    tokens: paddle.Tensor
    segments: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def token_count(self) -> int:
        return int(self.tokens.shape[-2])

    def segment(self, name: str) -> paddle.Tensor:
        start, end = self.segments[name]
        return self.tokens[..., start:end, :]


class ProjectionHead(nn.Layer):
    """可学习投影头 Π：把 d_in 维通道映射到 d_model，token 数保持 K·m"""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.d_in = d_in
        self.d_model = d_model
        self.fc = make_linear(d_in, d_model)

    def forward(self, tokens: paddle.Tensor) -> paddle.Tensor:
        if tokens.shape[-1] != self.d_in:
            raise DimensionMismatchError(
                f"投影头期望输入维度 {self.d_in}，得到 {tokens.shape[-1]}",
                expected=self.d_in,
                got=tokens.shape[-1],
            )
        if tokens.ndim == 4:  # B×K×m×d
            b, k, m, d = tokens.shape
            tokens = tokens.reshape([b, k * m, d])
        elif tokens.ndim == 3:  # K×m×d
            k, m, d = tokens.shape
            tokens = tokens.reshape([k * m, d])
        return self.fc(tokens)


def project(tokens: TensorLike, head: ProjectionHead) -> paddle.Tensor:
    """K×m×d → (K·m)×d_model 的逐行仿射变换"""
    return head(as_tensor(tokens))


class CrossAttention(nn.Layer):
    """单头缩放点积注意力，带可学习的 Q/K/V/输出映射"""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.q_proj = make_linear(d_model, d_model)
        self.k_proj = make_linear(d_model, d_model)
        self.v_proj = make_linear(d_model, d_model)
        self.out_proj = make_linear(d_model, d_model)
        self.scale = 1.0 / math.sqrt(d_model)

    def attention_weights(self, query: paddle.Tensor, kv: paddle.Tensor) -> paddle.Tensor:
        self._check(query, kv)
        q = self.q_proj(query)
        k = self.k_proj(kv)
        return F.softmax(paddle.matmul(q, k, transpose_y=True) * self.scale, axis=-1)

    def forward(self, query: paddle.Tensor, kv: paddle.Tensor) -> paddle.Tensor:
        weights = self.attention_weights(query, kv)
        return self.out_proj(paddle.matmul(weights, self.v_proj(kv)))

    def _check(self, query: paddle.Tensor, kv: paddle.Tensor) -> None:
        if kv.shape[-2] == 0:
            raise DataValidationError("交叉注意力的 key/value 不能为空")
        if query.shape[-1] != self.d_model or kv.shape[-1] != self.d_model:
            raise DimensionMismatchError(
                f"注意力维度不一致: query {query.shape[-1]}, kv {kv.shape[-1]}, d_model {self.d_model}",
                expected=self.d_model,
                got=(query.shape[-1], kv.shape[-1]),
            )


def cross_attend(query: QueryFeature, kv: TensorLike, attention: CrossAttention) -> paddle.Tensor:
    """以 f̄_I 为 query、kv 同时作 key 与 value 的交叉注意力，输出 p×d_model"""
    return attention(query.tokens, as_tensor(kv))


class RetrievalFusion(nn.Layer):
    """
    一路外部特征（检索特征 R 或多模态特征 M）与查询特征的融合

    mode:
      none       f = f̄_I
      concat     f = Concat(f̄_I, Π(R))
      concat+CA  f = Concat(f̄_I, Π(R), f_c)，f_c = CA(f̄_I, Π(R))
    """

    def __init__(self, mode: str, d_in: int, d_model: int):
        super().__init__()
        if mode not in FUSION_MODES:
            raise DataValidationError(f"fusion.mode 必须是 {FUSION_MODES} 之一，得到 {mode!r}", invalid_data=mode)
        self.mode = mode
        self.d_in = d_in
        self.d_model = d_model
        self.projection = ProjectionHead(d_in, d_model)
        self.attention = CrossAttention(d_model)

    def forward(self, query: paddle.Tensor, external: Optional[paddle.Tensor]) -> FusedFeature:
        """query: [B, p, D]；external: [B, K, m, d] 或 [B, m', d]"""
        p = int(query.shape[1])
        if self.mode == "none":
            return FusedFeature(tokens=query, segments={"query": (0, p)})
        if external is None:
            raise DataValidationError(f"融合方式 {self.mode} 需要外部特征")
        if external.ndim == 3:
            external = external.unsqueeze(1)
        projected = self.projection(external)
        km = int(projected.shape[1])
        parts = [query, projected]
        segments = {"query": (0, p), "retrieved": (p, p + km)}
        if self.mode == "concat+CA":
            parts.append(self.attention(query, projected))
            segments["cross"] = (p + km, p + km + p)
        return FusedFeature(tokens=paddle.concat(parts, axis=1), segments=segments)


def _batched(query: QueryFeature) -> Tuple[paddle.Tensor, bool]:
    tokens = query.tokens
    if tokens.ndim == 2:
        return tokens.unsqueeze(0), True
    return tokens, False


def _unbatch(fused: FusedFeature, squeeze: bool) -> FusedFeature:
    if squeeze:
        return FusedFeature(tokens=fused.tokens.squeeze(0), segments=fused.segments)
    return fused


def fuse_retrieval(query: QueryFeature, retrieved: Union[RetrievalResult, TensorLike, None], fusion: RetrievalFusion) -> FusedFeature:
    """
    检索融合：查询 token 拼接投影后的检索 token 与交叉注意力输出（按 fusion.mode 取舍）
    retrieved 为 RetrievalResult 或 K×m×d / B×K×m×d 张量
    """
    tokens, squeeze = _batched(query)
    external = None
    if fusion.mode != "none":
        if isinstance(retrieved, RetrievalResult):
            retrieved = retrieved.stacked()
        if retrieved is None:
            raise DataValidationError(f"融合方式 {fusion.mode} 需要检索结果")
        external = as_tensor(retrieved)
        if external.ndim == 3:
            external = external.unsqueeze(0)
    return _unbatch(fusion(tokens, external), squeeze)


def fuse_multimodal(query: QueryFeature, embedding: Union[MultiModalEmbedding, TensorLike, None], fusion: RetrievalFusion) -> Optional[FusedFeature]:
    """文字融合：查询 token 与投影后的文字嵌入做同样的拼接与交叉注意力；没有文字嵌入时返回 None（解码器只接收 f_R）"""
    if embedding is None:
        return None
    if isinstance(embedding, MultiModalEmbedding):
        embedding = embedding.tokens
    tokens, squeeze = _batched(query)
    external = as_tensor(embedding)
    if external.ndim == 2:
        external = external.unsqueeze(0)
    return _unbatch(fusion(tokens, external), squeeze)


class HashedTextEmbedder:
    """
    无词表的哈希词袋文字嵌入
    每个词取字符三元组做特征哈希得到 dim 维单位向量，按词序循环填满 n_tokens 行
    """

    EMPTY_TOKEN = "__empty__"

    def __init__(self, dim: int = 32, n_tokens: int = 16):
        self.dim = dim
        self.n_tokens = n_tokens

    def _word_vector(self, word: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        padded = f"#{word}#"
        grams = [padded[i:i + 3] for i in range(max(1, len(padded) - 2))]
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] & 1 else -1.0
            vector[bucket] += sign
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector

    def embed(self, caption: Optional[str]) -> MultiModalEmbedding:
        words = tokenize_caption(caption or "") or [self.EMPTY_TOKEN]
        vectors = [self._word_vector(words[i % len(words)]) for i in range(self.n_tokens)]
        return MultiModalEmbedding(tokens=np.stack(vectors).astype(np.float32), caption=caption or "")
