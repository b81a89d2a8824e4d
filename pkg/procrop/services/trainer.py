"""
训练模块
两阶段训练：第一阶段在随机裁剪对上初始化，第二阶段在画布 + 伪标签上训练并穿插伪标签精炼；
人工标注数据集直接在标注裁剪（MOS 归一化为目标分数）上训练
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import paddle

from ..core.config_manager import ModelConfig, RefineConfig
from ..core.exceptions import DataValidationError, NumericalError
from ..core.models import AnnotationRecord, CropBox, WeakPair
from ..core.utils import derive_seed
from .data_exporter import CropDataset, DataExporter
from .embedding_store import EmbeddingCache, EmbeddingIndex, encode, parse_encoder_spec
from .fusion import HashedTextEmbedder
from .image_processor import ImageProcessor
from .proposal_model import LossWeights, PredictionSession, ProCropModel, match_and_loss
from .weakgen import pairs_from_dataset, refine_labels, sample_random_crops

logger = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    """一个训练样本：模型输入、检索特征、文字特征和 (标签框, 目标分数)"""
    sample_id: str
    image: np.ndarray
    labels: List[Tuple[CropBox, float]]
    retrieved: Optional[np.ndarray] = None
    text: Optional[np.ndarray] = None


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    mean_loss: float
    batches: int


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.mean_loss for r in self.records]

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def rows(self) -> List[Dict]:
        return [
            {"epoch": r.epoch, "stage": r.stage, "mean_loss": r.mean_loss, "batches": r.batches}
            for r in self.records
        ]

    def to_csv(self, path) -> None:
        DataExporter().export_table(self.rows(), path, columns=["epoch", "stage", "mean_loss", "batches"])


@dataclass
class TrainingResult:
    model: ProCropModel
    log: TrainingLog
    pairs: List[WeakPair] = field(default_factory=list)


def normalized_mos(record: AnnotationRecord) -> List[Tuple[CropBox, float]]:
    """每张图的 MOS 线性归一化到 [0,1]；全部相同时目标为 1"""
    scores = [c.mos for c in record.crops]
    low, high = min(scores), max(scores)
    if high - low <= 1e-12:
        return [(c.box, 1.0) for c in record.crops]
    return [(c.box, (c.mos - low) / (high - low)) for c in record.crops]


class Trainer:
    """模型训练器类，参数由单一写者更新，数据顺序由种子决定"""

    def __init__(
        self,
        config: ModelConfig,
        index: Optional[EmbeddingIndex] = None,
        encoder_spec: str = "line-hist:8,8",
        cache_dir: Optional[str] = None,
        refine_config: Optional[RefineConfig] = None,
    ):
        self.config = config
        self.index = index
        self.encoder_spec = encoder_spec
        self.cache_dir = cache_dir
        self.refine_config = refine_config or RefineConfig()
        self.processor = ImageProcessor(config.input_size)
        self.text_embedder = HashedTextEmbedder(config.text_dim, config.text_tokens) if config.use_text else None
        self.weights = LossWeights.from_config(config)
        self.logger = logging.getLogger(__name__)

        if config.uses_retrieval and index is None:
            raise DataValidationError(f"融合方式 {config.fusion_mode} 需要检索库")
        retrieval_dim = index.d if index is not None else 1
        self.model = ProCropModel(config, retrieval_dim)
        self.optimizer = paddle.optimizer.AdamW(
            learning_rate=config.learning_rate,
            parameters=self.model.parameter_groups(),
            weight_decay=config.weight_decay,
        )
        self.log = TrainingLog()

    # ------------------------------------------------------------------
    # 样本准备
    # ------------------------------------------------------------------

    def _retrieve(self, image: np.ndarray, sample_id: str, exclude: Sequence[str]) -> Optional[np.ndarray]:
        if not self.config.uses_retrieval:
            return None
        encoder = parse_encoder_spec(self.encoder_spec)
        if self.cache_dir:
            query = EmbeddingCache(self.cache_dir).encode(image, encoder, sample_id)
        else:
            query = encode(image, encoder, sample_id)
        result = self.index.retrieve(query, self.config.k_retrieve, exclude_ids=exclude)
        if result.k < self.config.k_retrieve:
            raise DataValidationError(
                f"检索库排除自身后只剩 {result.k} 条记录，少于 K={self.config.k_retrieve}",
                invalid_data=sample_id,
            )
        return result.stacked()

    def _text(self, caption: Optional[str]) -> Optional[np.ndarray]:
        if self.text_embedder is None:
            return None
        return self.text_embedder.embed(caption).tokens

    def make_sample(
        self,
        sample_id: str,
        image: np.ndarray,
        labels: List[Tuple[CropBox, float]],
        exclude: Sequence[str] = (),
        caption: Optional[str] = None,
    ) -> TrainingSample:
        return TrainingSample(
            sample_id=sample_id,
            image=self.processor.to_model_input(image),
            labels=labels,
            retrieved=self._retrieve(image, sample_id, exclude),
            text=self._text(caption),
        )

    def supervised_samples(self, dataset: CropDataset) -> List[TrainingSample]:
        samples = []
        for record in dataset.records:
            if not record.crops:
                self.logger.warning(f"图像 {record.image_id} 没有标注裁剪，跳过")
                continue
            image = self.processor.load_image(dataset.image_path(record.image_id))
            samples.append(self.make_sample(
                record.image_id, image, normalized_mos(record), exclude=(record.image_id,), caption=record.caption
            ))
        return samples

    def crop_samples(self, pairs: Sequence[WeakPair]) -> List[TrainingSample]:
        """第一阶段样本：每个画布上的随机裁剪，标签为裁剪坐标系下的 gt_region"""
        samples = []
        for pair in pairs:
            crops = sample_random_crops(
                pair,
                self.refine_config.crops_per_pair,
                derive_seed(self.config.seed, f"crops:{pair.pair_id}"),
            )
            for j, (crop, label) in enumerate(crops):
                image = self.processor.extract_crop(pair.canvas, crop)
                samples.append(self.make_sample(
                    f"{pair.pair_id}#c{j}", image, [(label, 1.0)],
                    exclude=(pair.provenance.source_id, pair.pair_id),
                ))
        return samples

    def canvas_samples(self, pairs: Sequence[WeakPair]) -> List[TrainingSample]:
        """第二阶段样本：整张画布，伪标签目标分数均为 1"""
        return [
            self.make_sample(
                pair.pair_id,
                pair.canvas,
                [(p.box, 1.0) for p in pair.pseudo_labels],
                exclude=(pair.provenance.source_id, pair.pair_id),
            )
            for pair in pairs
        ]

    # ------------------------------------------------------------------
    # 训练循环
    # ------------------------------------------------------------------

    def _batch_loss(self, batch: Sequence[TrainingSample], batch_id: str) -> paddle.Tensor:
        images = np.stack([s.image for s in batch])
        retrieved = np.stack([s.retrieved for s in batch]) if batch[0].retrieved is not None else None
        text = np.stack([s.text for s in batch]) if batch[0].text is not None else None
        output = self.model(images, retrieved, text)
        losses = [
            match_and_loss(output.boxes[i], output.scores[i], sample.labels, self.weights)[0]
            for i, sample in enumerate(batch)
        ]
        loss = paddle.add_n(losses) / len(losses)
        value = float(loss.numpy())
        if not math.isfinite(value):
            raise NumericalError(
                f"损失出现非有限值 {value}，批次 {batch_id}，样本 {[s.sample_id for s in batch]}",
                batch_id=batch_id,
            )
        return loss

    def train_epochs(self, samples: Sequence[TrainingSample], epochs: int, stage: str) -> TrainingLog:
        if not samples:
            raise DataValidationError("训练集为空")
        self.model.train()
        batch_size = self.config.batch_size
        for _ in range(epochs):
            epoch = self.model.trained_epochs
            order = np.random.default_rng(derive_seed(self.config.seed, f"shuffle:{epoch}")).permutation(len(samples))
            total, batches = 0.0, 0
            for b, start in enumerate(range(0, len(samples), batch_size)):
                batch = [samples[i] for i in order[start:start + batch_size]]
                loss = self._batch_loss(batch, f"epoch{epoch}-batch{b}")
                loss.backward()
                self.optimizer.step()
                self.optimizer.clear_grad()
                total += float(loss.numpy())
                batches += 1
            self.model.trained_epochs += 1
            record = EpochRecord(epoch=epoch, stage=stage, mean_loss=total / batches, batches=batches)
            self.log.append(record)
            self.logger.info(f"[{stage}] 第 {epoch + 1} 轮, 平均损失 {record.mean_loss:.6f}")
        return self.log

    def session(self) -> PredictionSession:
        return PredictionSession(
            model=self.model,
            index=self.index,
            k_retrieve=self.config.k_retrieve,
            encoder_spec=self.encoder_spec,
            cache_dir=self.cache_dir,
            image_processor=self.processor,
            text_embedder=self.text_embedder,
        )

    def fit_supervised(self, dataset: CropDataset) -> TrainingResult:
        samples = self.supervised_samples(dataset)
        self.train_epochs(samples, self.config.epochs, "supervised")
        return TrainingResult(model=self.model, log=self.log)

    def fit_weak(self, pairs: Sequence[WeakPair]) -> TrainingResult:
        """
        第一阶段 stage1_epochs 轮随机裁剪训练；
        剩余轮数平均分给 rounds 次「精炼伪标签 → 画布训练」
        """
        pairs = list(pairs)
        if not pairs:
            raise DataValidationError("弱监督训练集为空")
        if self.config.stage1_epochs > 0:
            self.train_epochs(self.crop_samples(pairs), self.config.stage1_epochs, "stage1")

        remaining = self.config.epochs - self.config.stage1_epochs
        rounds = self.refine_config.rounds
        if remaining > 0:
            chunks = max(rounds, 1)
            for r in range(chunks):
                epochs = remaining // chunks + (1 if r < remaining % chunks else 0)
                if rounds > 0 and self.model.trained_epochs > 0:
                    pairs = refine_labels(self.session(), pairs, self.refine_config)
                elif rounds > 0:
                    self.logger.warning("模型尚未训练，跳过伪标签精炼")
                if epochs > 0:
                    self.train_epochs(self.canvas_samples(pairs), epochs, f"stage2-round{r + 1}")
        self.model.eval()
        return TrainingResult(model=self.model, log=self.log, pairs=pairs)


def train(
    dataset,
    index: Optional[EmbeddingIndex],
    config: ModelConfig,
    encoder_spec: str = "line-hist:8,8",
    refine_config: Optional[RefineConfig] = None,
    cache_dir: Optional[str] = None,
) -> TrainingResult:
    """
    训练入口；dataset 可以是 CropDataset（按 manifest 判断是否弱监督）或 WeakPair 列表
    """
    trainer = Trainer(config, index, encoder_spec, cache_dir, refine_config)
    if isinstance(dataset, CropDataset):
        if dataset.weak:
            return trainer.fit_weak(pairs_from_dataset(dataset, trainer.processor))
        return trainer.fit_supervised(dataset)
    return trainer.fit_weak(dataset)
