"""
主控制器模块
负责协调各个服务，实现命令行的每个子命令
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ..core.config_manager import RunConfig
from ..core.exceptions import DataValidationError
from ..core.models import AnnotationRecord, CropProposal, EvalReport
from ..core.utils import image_id_from_path, list_images
from ..services.data_exporter import (
    ANNOTATION_FILE,
    CropDataset,
    DataExporter,
    annotations_by_id,
    load_dataset,
    read_annotations,
    read_predictions,
    write_annotations,
    write_predictions,
)
from ..services.embedding_store import (
    EmbeddingCache,
    EmbeddingIndex,
    FileEmbeddingEncoder,
    build_index,
    encode,
    parse_encoder_spec,
    read_embedding_cache,
    swap_index,
)
from ..services.evaluation import anchor_baseline_predictions, evaluate_dataset, gt_region_annotations
from ..services.image_processor import ImageProcessor
from ..services.proposal_model import PredictionSession, load_checkpoint, predict, save_checkpoint
from ..services.trainer import train
from ..services.weakgen import build_weak_dataset, label_statistics, pairs_from_dataset, refine_labels

logger = logging.getLogger(__name__)


class MainController:
    """主控制器类，持有本次运行唯一的可变上下文（配置）"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.image_processor = ImageProcessor(config.model.input_size)
        self.data_exporter = DataExporter()
        self.logger = logging.getLogger(__name__)

    @property
    def cache_dir(self) -> Optional[str]:
        return self.config.run.cache_dir or None

    # ------------------------------------------------------------------
    # 检索库
    # ------------------------------------------------------------------

    def build_index(self, src_dir: Optional[str], out_path, encoder_spec: Optional[str] = None, similarity: Optional[str] = None) -> Dict:
        """编码目录中的全部图像并保存索引"""
        spec = encoder_spec or self.config.retrieval.encoder
        similarity = similarity or self.config.retrieval.similarity
        encoder = parse_encoder_spec(spec)
        if isinstance(encoder, FileEmbeddingEncoder) and encoder.path.suffix != ".npy":
            records = read_embedding_cache(encoder.path)
        else:
            if src_dir is None:
                raise DataValidationError(f"编码器 {spec} 需要参考图像目录 --src")
            paths = list_images(src_dir)
            if not paths:
                raise DataValidationError(f"目录中没有图像: {src_dir}")
            cache = EmbeddingCache(self.cache_dir) if self.cache_dir else None

            def encode_one(path: Path):
                image = self.image_processor.load_image(path)
                image_id = image_id_from_path(path)
                return cache.encode(image, encoder, image_id) if cache else encode(image, encoder, image_id)

            with ThreadPoolExecutor(max_workers=self.config.run.workers) as pool:
                records = list(pool.map(encode_one, paths))

        timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        index = build_index(records, encoder_id=spec, similarity=similarity, build_timestamp=timestamp)
        index.save(out_path)
        return {"index": str(out_path), "count": len(index), "m": index.m, "d": index.d, "encoder": spec}

    def load_index(self, index_path) -> EmbeddingIndex:
        index = EmbeddingIndex.load(index_path)
        if index.metadata.similarity != self.config.retrieval.similarity:
            index = index.with_similarity(self.config.retrieval.similarity)
        return index

    def retrieve(self, index_path, image_path, k: Optional[int] = None, exclude_self: Optional[bool] = None) -> Dict:
        """exclude_self 为 None 时使用 retrieval.exclude_self 配置（默认不排除，查询图像在库中时排第 1）"""
        index = self.load_index(index_path)
        encoder = parse_encoder_spec(index.metadata.encoder_id if index.metadata.encoder_id != "unknown" else self.config.retrieval.encoder)
        image_id = image_id_from_path(image_path)
        image = None if isinstance(encoder, FileEmbeddingEncoder) else self.image_processor.load_image(image_path)
        query = encode(image, encoder, image_id)
        if exclude_self is None:
            exclude_self = self.config.retrieval.exclude_self
        exclude = (image_id,) if exclude_self else ()
        result = index.retrieve(query, k or self.config.fusion.k_retrieve, exclude_ids=exclude)
        return {
            "query": image_id,
            "neighbors": [{"id": n.image_id, "similarity": n.similarity} for n in result.neighbors],
        }

    # ------------------------------------------------------------------
    # 训练与推理
    # ------------------------------------------------------------------

    def _maybe_index(self, index_path) -> Optional[EmbeddingIndex]:
        if index_path is None:
            if self.config.model.uses_retrieval:
                raise DataValidationError(f"融合方式 {self.config.model.fusion_mode} 需要 --index")
            return None
        return self.load_index(index_path)

    def train(self, data_dir, out_path, index_path=None) -> Dict:
        dataset = load_dataset(data_dir)
        index = self._maybe_index(index_path)
        encoder_spec = index.metadata.encoder_id if index is not None else self.config.retrieval.encoder
        result = train(
            dataset,
            index,
            self.config.model,
            encoder_spec=encoder_spec,
            refine_config=self.config.weakgen,
            cache_dir=self.cache_dir,
        )
        out_path = Path(out_path)
        save_checkpoint(
            result.model,
            out_path,
            extra={"encoder": encoder_spec, "config_hash": self.config.config_hash()},
        )
        log_path = out_path.with_name(out_path.name + ".loss.csv")
        result.log.to_csv(log_path)
        labels_path = None
        if dataset.weak and result.pairs:
            # 精炼后的伪标签与检查点放在一起，输入数据集保持不变
            labels_path = write_annotations(
                out_path.with_name(out_path.name + ".labels.jsonl"), [p.to_annotation() for p in result.pairs]
            )
        losses = result.log.losses
        return {
            "checkpoint": str(out_path),
            "loss_log": str(log_path),
            "labels": str(labels_path) if labels_path else None,
            "epochs": result.model.trained_epochs,
            "initial_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None,
            "losses": losses,
        }

    def load_session(self, ckpt_path, index_path=None, k: Optional[int] = None) -> PredictionSession:
        model = load_checkpoint(ckpt_path)
        encoder_spec = model.checkpoint_extra.get("encoder", self.config.retrieval.encoder)
        session = PredictionSession(
            model=model,
            index=None,
            k_retrieve=model.config.k_retrieve if k is None else k,
            encoder_spec=encoder_spec,
            cache_dir=self.cache_dir,
            image_processor=self.image_processor,
        )
        if index_path is not None:
            session = swap_index(session, self.load_index(index_path))
        elif session.uses_retrieval:
            raise DataValidationError(f"融合方式 {model.config.fusion_mode} 需要 --index")
        return session

    def predict_dataset(self, session: PredictionSession, dataset: CropDataset) -> Dict[str, List[CropProposal]]:
        predictions = {}
        for record in dataset.records:
            image = self.image_processor.load_image(dataset.image_path(record.image_id))
            exclude = {record.image_id, str(record.extras.get("source", record.image_id))}
            predictions[record.image_id] = predict(
                session, image, image_id=record.image_id, caption=record.caption, exclude_ids=sorted(exclude)
            )
        return predictions

    def predict(
        self,
        ckpt_path,
        index_path=None,
        image_path=None,
        data_dir=None,
        topk: int = 3,
        render_path=None,
        out_path=None,
        k: Optional[int] = None,
    ) -> Dict:
        if (image_path is None) == (data_dir is None):
            raise DataValidationError("predict 需要 --image 或 --data 之一")
        session = self.load_session(ckpt_path, index_path, k)

        if image_path is not None:
            image_id = image_id_from_path(image_path)
            image = self.image_processor.load_image(image_path)
            proposals = predict(session, image, image_id=image_id, exclude_ids=(image_id,))
            result = {"id": image_id, "proposals": [p.to_dict() for p in proposals[:topk]]}
            if render_path is not None:
                self.image_processor.render_overlay(image_path, proposals, render_path, topk)
                result["render"] = str(render_path)
            if out_path is not None:
                write_predictions(out_path, {image_id: proposals})
            return result

        dataset = load_dataset(data_dir)
        predictions = self.predict_dataset(session, dataset)
        out_path = out_path or Path(data_dir) / "predictions.jsonl"
        write_predictions(out_path, predictions)
        return {
            "predictions": str(out_path),
            "images": len(predictions),
            "top1": {image_id: p[0].to_dict() for image_id, p in sorted(predictions.items()) if p},
        }

    # ------------------------------------------------------------------
    # 评估与报告
    # ------------------------------------------------------------------

    def _annotations(self, records: Sequence[AnnotationRecord], gt_only: bool) -> Dict[str, AnnotationRecord]:
        return gt_region_annotations(records) if gt_only else annotations_by_id(records)

    def evaluate(
        self,
        pred_path,
        ann_path,
        eps: Optional[float] = None,
        out_path=None,
        gt_only: bool = False,
        baseline: Optional[str] = None,
    ) -> EvalReport:
        """评估预测文件；baseline=anchor 时改用随机排序的网格锚框作为预测"""
        if (pred_path is None) == (baseline is None):
            raise DataValidationError("evaluate 需要 --pred 或 --baseline 之一")
        annotations = self._annotations(read_annotations(ann_path), gt_only)
        if baseline is not None:
            predictions = anchor_baseline_predictions(annotations, seed=self.config.run.seed)
        else:
            predictions = read_predictions(pred_path)
        report = evaluate_dataset(predictions, annotations, eps=self.config.evaluation.eps if eps is None else eps)
        if out_path is not None:
            self.data_exporter.export_report(report, out_path)
        return report

    def report(self, report_path, out_path=None) -> EvalReport:
        path = Path(report_path)
        if not path.exists():
            raise FileNotFoundError(f"报告文件不存在: {path}")
        try:
            report = EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError) as e:
            raise DataValidationError(f"无效的报告文件: {e}", invalid_data=str(path))
        if out_path is not None:
            self.data_exporter.export_report(report, out_path)
        return report

    def sweep(self, ckpt_path, index_path, data_dir, ks: Sequence[int], out_path=None, gt_only: Optional[bool] = None) -> List[Dict]:
        """推理时检索数量 K 的扫描：每个 K 计算 IoU_i / Disp_i"""
        dataset = load_dataset(data_dir)
        gt_only = dataset.weak if gt_only is None else gt_only
        annotations = self._annotations(dataset.records, gt_only)
        rows = []
        for k in ks:
            session = self.load_session(ckpt_path, index_path, k)
            report = evaluate_dataset(self.predict_dataset(session, dataset), annotations, eps=self.config.evaluation.eps)
            row: Dict = {"k": k}
            row.update({f"iou_{i}": v for i, v in sorted(report.iou.items())})
            row.update({f"disp_{i}": v for i, v in sorted(report.disp.items())})
            rows.append(row)
            self.logger.info(f"K={k}: IoU_1={report.iou.get(1, 0.0):.4f}")
        if out_path is not None:
            self.data_exporter.export_table(rows, out_path)
        return rows

    # ------------------------------------------------------------------
    # 弱监督数据
    # ------------------------------------------------------------------

    def genweak(self, src_dir, out_dir) -> Dict:
        dataset = build_weak_dataset(
            src_dir, out_dir, self.config.weakgen, self.config.run.seed, workers=self.config.run.workers
        )
        return {
            "out": str(out_dir),
            "pairs": len(dataset.pairs),
            "skipped": dataset.skipped,
            "config_hash": dataset.config_hash,
        }

    def refine(self, ckpt_path, data_dir, index_path=None, rounds: Optional[int] = None) -> Dict:
        dataset = load_dataset(data_dir)
        if not dataset.weak:
            raise DataValidationError(f"refine 只能用于弱监督数据集（缺少 manifest）: {data_dir}")
        session = self.load_session(ckpt_path, index_path)
        pairs = pairs_from_dataset(dataset, self.image_processor)
        rounds = self.config.weakgen.rounds if rounds is None else rounds
        for _ in range(rounds):
            pairs = refine_labels(session, pairs, self.config.weakgen)
        write_annotations(Path(data_dir) / ANNOTATION_FILE, [p.to_annotation() for p in pairs])
        stats = label_statistics(pairs)
        stats["rounds"] = rounds
        return stats
