"""
构图特征存储模块
负责构图嵌入的计算/加载、专业图像库索引的构建与持久化，以及 top-K 检索
"""
import logging
import struct
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import cv2
import numpy as np

from ..core.exceptions import (
    DataValidationError,
    DimensionMismatchError,
    EmbeddingError,
    IndexFormatError,
)
from ..core.models import EmbeddingRecord, Neighbor, RetrievalResult
from ..core.utils import sha256_bytes

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"PCEMB1\x00"
DEFAULT_K = 10


class LineHistogramEncoder:
    """
    方向梯度直方图编码器（构图可由线条组合刻画）

    图像划分为 grid×grid 个格子，每个格子统计无符号梯度方向的幅值直方图，
    得到 m = grid² 行、d = bins 列的 token 矩阵，行按格子行优先排列，
    整体按总幅值归一化。
    """

    def __init__(self, grid: int = 8, bins: int = 8):
        if grid < 1 or bins < 1:
            raise DataValidationError(f"无效的编码器参数: grid={grid}, bins={bins}")
        self.grid = grid
        self.bins = bins

    @property
    def encoder_id(self) -> str:
        return f"line-hist:{self.grid},{self.bins}"

    def encode_tokens(self, image: np.ndarray) -> np.ndarray:
        if image is None or image.size == 0:
            raise DataValidationError("空图像无法编码")
        if image.ndim == 3:
            gray = cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
        else:
            gray = image
        gray = gray.astype(np.float64) / 255.0

        gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
        gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
        magnitude = np.hypot(gx, gy)
        angle = np.mod(np.arctan2(gy, gx), np.pi)
        bin_index = np.minimum((angle / (np.pi / self.bins)).astype(np.int64), self.bins - 1)

        height, width = gray.shape
        rows = np.linspace(0, height, self.grid + 1).astype(np.int64)
        cols = np.linspace(0, width, self.grid + 1).astype(np.int64)
        tokens = np.zeros((self.grid * self.grid, self.bins), dtype=np.float64)
        for r in range(self.grid):
            for c in range(self.grid):
                cell_mag = magnitude[rows[r]:rows[r + 1], cols[c]:cols[c + 1]].ravel()
                cell_bin = bin_index[rows[r]:rows[r + 1], cols[c]:cols[c + 1]].ravel()
                tokens[r * self.grid + c] = np.bincount(cell_bin, weights=cell_mag, minlength=self.bins)

        total = tokens.sum()
        if total > 1e-12:
            tokens /= total
        return tokens.astype(np.float32)


class FileEmbeddingEncoder:
    """从 .npy 矩阵或 PCEMB1 缓存文件读取预计算的 token"""

    def __init__(self, path: str):
        self.path = Path(path)
        self._cache: Optional[Dict[str, np.ndarray]] = None

    @property
    def encoder_id(self) -> str:
        return f"file:{self.path}"

    def load_tokens(self, image_id: str) -> np.ndarray:
        if not self.path.exists():
            raise EmbeddingError(f"嵌入文件不存在: {self.path}", path=str(self.path))
        if self.path.suffix == ".npy":
            return np.load(self.path).astype(np.float32)
        if self._cache is None:
            self._cache = {r.image_id: r.tokens for r in read_embedding_cache(self.path)}
        if image_id not in self._cache:
            raise EmbeddingError(f"嵌入文件中没有图像 {image_id}: {self.path}", path=str(self.path))
        return self._cache[image_id]


def parse_encoder_spec(spec: str):
    """解析编码器描述：file:<path> 或 line-hist:<grid,bins>"""
    kind, _, arg = spec.partition(":")
    if kind == "file" and arg:
        return FileEmbeddingEncoder(arg)
    if kind == "line-hist":
        if not arg:
            return LineHistogramEncoder()
        try:
            grid, bins = (int(v) for v in arg.split(","))
        except ValueError:
            raise DataValidationError(f"无效的 line-hist 参数: {spec}", invalid_data=spec)
        return LineHistogramEncoder(grid, bins)
    raise DataValidationError(f"未知的编码器: {spec}（支持 file:<path> 与 line-hist:<grid,bins>）", invalid_data=spec)


def encode(image: Optional[np.ndarray], encoder, image_id: str = "query") -> EmbeddingRecord:
    """计算或加载一张图像的构图嵌入"""
    if isinstance(encoder, str):
        encoder = parse_encoder_spec(encoder)
    if isinstance(encoder, FileEmbeddingEncoder):
        return EmbeddingRecord(image_id=image_id, tokens=encoder.load_tokens(image_id))
    if image is None or image.size == 0:
        raise DataValidationError(f"空图像无法编码: {image_id}")
    return EmbeddingRecord(image_id=image_id, tokens=encoder.encode_tokens(image))


class EmbeddingCache:
    """查询图像嵌入的磁盘缓存，按图像内容哈希 + 编码器标识索引"""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)

    def _path(self, image: np.ndarray, encoder_id: str) -> Path:
        key = sha256_bytes(image.tobytes() + repr(image.shape).encode() + encoder_id.encode())
        return self.cache_dir / f"{key[:32]}.npy"

    def encode(self, image: np.ndarray, encoder, image_id: str) -> EmbeddingRecord:
        if isinstance(encoder, FileEmbeddingEncoder):
            return encode(image, encoder, image_id)
        path = self._path(image, encoder.encoder_id)
        if path.exists():
            return EmbeddingRecord(image_id=image_id, tokens=np.load(path))
        record = encode(image, encoder, image_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, record.tokens)
        return record


# ----------------------------------------------------------------------------
# 缓存文件格式：magic, u32 count, u32 m, u32 d, 每条记录 u16 id 长度 + UTF-8 id + m·d 个 float32
# ----------------------------------------------------------------------------

def write_embedding_cache(path, records: Sequence[EmbeddingRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m, d = (records[0].m, records[0].d) if records else (0, 0)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", len(records), m, d))
        for record in records:
            encoded = record.image_id.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(record.tokens.astype("<f4").tobytes())


def read_embedding_cache(path) -> List[EmbeddingRecord]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IndexFormatError(f"无法读取嵌入缓存: {e}", path=str(path))
    if not data.startswith(CACHE_MAGIC):
        raise IndexFormatError(f"嵌入缓存 magic 不匹配: {path}", path=str(path))
    offset = len(CACHE_MAGIC)
    try:
        count, m, d = struct.unpack_from("<III", data, offset)
        offset += 12
        records = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            image_id = data[offset:offset + id_len].decode("utf-8")
            offset += id_len
            nbytes = 4 * m * d
            if offset + nbytes > len(data):
                raise IndexFormatError(f"嵌入缓存被截断: {path}", path=str(path))
            tokens = np.frombuffer(data, dtype="<f4", count=m * d, offset=offset).reshape(m, d)
            offset += nbytes
            records.append(EmbeddingRecord(image_id=image_id, tokens=tokens.astype(np.float32)))
    except (struct.error, UnicodeDecodeError) as e:
        raise IndexFormatError(f"嵌入缓存格式错误: {e}", path=str(path))
    return records


# ----------------------------------------------------------------------------
# 相似度后端
# ----------------------------------------------------------------------------

class SimilarityBackend(Protocol):
    """相似度检索后端接口，可替换为近似检索实现"""

    def scores(self, query: EmbeddingRecord) -> np.ndarray:
        ...


class PooledCosineBackend:
    """均值池化向量的余弦相似度（精确暴力扫描）"""

    def __init__(self, records: Sequence[EmbeddingRecord]):
        self.matrix = np.stack([r.pooled for r in records], axis=0)

    def scores(self, query: EmbeddingRecord) -> np.ndarray:
        return np.clip(self.matrix @ query.pooled, -1.0, 1.0)


class TokenCosineBackend:
    """token 级相似度：对查询的每一行取与记录各行余弦的最大值，再求均值"""

    def __init__(self, records: Sequence[EmbeddingRecord]):
        self.normed = np.stack([_row_normalize(r.tokens) for r in records], axis=0)  # n×m×d

    def scores(self, query: EmbeddingRecord) -> np.ndarray:
        q = _row_normalize(query.tokens)  # m×d
        sims = np.einsum("qd,nmd->nqm", q, self.normed)
        return np.clip(sims.max(axis=2).mean(axis=1), -1.0, 1.0)


def _row_normalize(tokens: np.ndarray) -> np.ndarray:
    t = tokens.astype(np.float64)
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    return np.divide(t, norms, out=np.zeros_like(t), where=norms > 1e-12)


@dataclass(frozen=True)
class IndexMetadata:
    m: int
    d: int
    encoder_id: str
    build_timestamp: str
    similarity: str = "pooled"


class EmbeddingIndex:
    """专业图像库的构图特征索引，构建后不可变"""

    def __init__(self, records: Sequence[EmbeddingRecord], metadata: IndexMetadata):
        self.records: Tuple[EmbeddingRecord, ...] = tuple(records)
        self.metadata = metadata
        self.logger = logging.getLogger(__name__)
        self._validate()
        self._ids = [r.image_id for r in self.records]
        # image_id 升序名次，用于同分排序
        self._id_rank = np.empty(len(self._ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self._ids, dtype=object), kind="stable")] = np.arange(len(self._ids))
        self._backend = self._make_backend(metadata.similarity)
        self._position = {image_id: i for i, image_id in enumerate(self._ids)}

    def _validate(self):
        if not self.records:
            raise DataValidationError("索引不能为空")
        seen = set()
        for record in self.records:
            if record.image_id in seen:
                raise DataValidationError(f"重复的 image_id: {record.image_id}", invalid_data=record.image_id)
            seen.add(record.image_id)
            if (record.m, record.d) != (self.metadata.m, self.metadata.d):
                raise DimensionMismatchError(
                    f"记录 {record.image_id} 的维度 {(record.m, record.d)} 与索引 {(self.metadata.m, self.metadata.d)} 不一致",
                    expected=(self.metadata.m, self.metadata.d),
                    got=(record.m, record.d),
                )

    def _make_backend(self, similarity: str) -> SimilarityBackend:
        if similarity == "pooled":
            return PooledCosineBackend(self.records)
        if similarity == "token":
            return TokenCosineBackend(self.records)
        raise DataValidationError(f"未知的相似度类型: {similarity}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def m(self) -> int:
        return self.metadata.m

    @property
    def d(self) -> int:
        return self.metadata.d

    @property
    def ids(self) -> List[str]:
        return list(self._ids)

    def get(self, image_id: str) -> EmbeddingRecord:
        return self.records[self._position[image_id]]

    def with_similarity(self, similarity: str) -> "EmbeddingIndex":
        return EmbeddingIndex(self.records, replace(self.metadata, similarity=similarity))

    def retrieve(
        self,
        query: EmbeddingRecord,
        k: int = DEFAULT_K,
        exclude_ids: Iterable[str] = (),
    ) -> RetrievalResult:
        """精确 top-K 检索，按 (-相似度, image_id) 排序"""
        if k < 1:
            raise DataValidationError(f"K 必须 >= 1，得到 {k}")
        if query.d != self.d:
            raise DimensionMismatchError(
                f"查询维度 {(query.m, query.d)} 与索引 {(self.m, self.d)} 不一致",
                expected=(self.m, self.d),
                got=(query.m, query.d),
            )
        if self.metadata.similarity == "token" and query.m != self.m:
            raise DimensionMismatchError("token 级相似度要求查询与索引的 m 相同", expected=self.m, got=query.m)

        started = time.perf_counter()
        sims = self._backend.scores(query)
        order = np.lexsort((self._id_rank, -sims))
        excluded = set(exclude_ids)
        neighbors = []
        for i in order:
            if self._ids[i] in excluded:
                continue
            record = self.records[i]
            neighbors.append(Neighbor(image_id=record.image_id, similarity=float(sims[i]), tokens=record.tokens))
            if len(neighbors) == k:
                break
        self.logger.debug(
            f"检索 {query.image_id}: {len(neighbors)} 个近邻, 库大小 {len(self)}, "
            f"耗时 {(time.perf_counter() - started) * 1000:.2f} ms"
        )
        return RetrievalResult(neighbors=neighbors)

    # ------------------------------------------------------------------
    # 持久化：二进制缓存文件 + 键值文本元数据
    # ------------------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        write_embedding_cache(path, self.records)
        meta_lines = [
            f"m={self.metadata.m}",
            f"d={self.metadata.d}",
            f"encoder_id={self.metadata.encoder_id}",
            f"build_timestamp={self.metadata.build_timestamp}",
            f"similarity={self.metadata.similarity}",
            f"count={len(self)}",
        ]
        metadata_path(path).write_text("\n".join(meta_lines) + "\n", encoding="utf-8")
        self.logger.info(f"索引已保存: {path}（{len(self)} 条记录, m={self.m}, d={self.d}）")
        return path

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        path = Path(path)
        records = read_embedding_cache(path)
        if not records:
            raise IndexFormatError(f"索引为空: {path}", path=str(path))
        meta = {}
        sidecar = metadata_path(path)
        if sidecar.exists():
            for line in sidecar.read_text(encoding="utf-8").splitlines():
                key, sep, value = line.partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
        metadata = IndexMetadata(
            m=records[0].m,
            d=records[0].d,
            encoder_id=meta.get("encoder_id", "unknown"),
            build_timestamp=meta.get("build_timestamp", ""),
            similarity=meta.get("similarity", "pooled"),
        )
        if "m" in meta and (int(meta["m"]), int(meta["d"])) != (metadata.m, metadata.d):
            raise IndexFormatError(f"索引元数据与记录维度不一致: {sidecar}", path=str(sidecar))
        return cls(records, metadata)


def metadata_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def build_index(
    records: Sequence[EmbeddingRecord],
    encoder_id: str = "unknown",
    similarity: str = "pooled",
    build_timestamp: Optional[str] = None,
) -> EmbeddingIndex:
    """由嵌入记录构建索引"""
    if not records:
        raise DataValidationError("构建索引需要至少一条记录")
    timestamp = build_timestamp or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    metadata = IndexMetadata(
        m=records[0].m,
        d=records[0].d,
        encoder_id=encoder_id,
        build_timestamp=timestamp,
        similarity=similarity,
    )
    index = EmbeddingIndex(records, metadata)
    logger.info(f"索引构建完成: {len(index)} 条记录, m={index.m}, d={index.d}, 编码器 {encoder_id}")
    return index


def swap_index(session, new_index: EmbeddingIndex):
    """
    推理时更换检索库，无需重新训练
    session 需要提供 index 字段与 retrieval_dim 属性（投影头期望的输入维度）
    """
    expected = session.retrieval_dim
    if new_index.d != expected:
        raise DimensionMismatchError(
            f"新索引的特征维度 d={new_index.d} 与投影头期望的 {expected} 不一致",
            expected=expected,
            got=new_index.d,
        )
    previous = len(session.index) if session.index is not None else 0
    logger.info(f"检索库已更换: {previous} → {len(new_index)} 条记录")
    return replace(session, index=new_index)
