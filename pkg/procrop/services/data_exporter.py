"""
数据读写与导出模块
负责标注/预测 JSONL 的读写、数据集目录加载，以及评估报告的表格化和导出（JSON、CSV、Excel）
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd

from ..core.exceptions import DataValidationError, ExportError
from ..core.models import AnnotationRecord, CropProposal, EvalReport
from ..core.utils import IMAGE_SUFFIXES

logger = logging.getLogger(__name__)

ANNOTATION_FILE = "annotations.jsonl"
IMAGE_DIR = "images"
MANIFEST_FILE = "manifest.txt"
FLOAT_FORMAT = "{:.4f}".format


def read_jsonl(path) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"文件不存在: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataValidationError(f"{path} 第 {line_no} 行不是合法 JSON: {e}", invalid_data=line_no)
    return rows


def write_jsonl(path, rows: Iterable[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as e:
        raise ExportError(f"JSONL 写入失败: {e}", file_path=str(path))
    return path


def read_annotations(path) -> List[AnnotationRecord]:
    """读取标注 JSONL，每行一张图像"""
    records = [AnnotationRecord.from_dict(row) for row in read_jsonl(path)]
    seen = set()
    for record in records:
        if record.image_id in seen:
            raise DataValidationError(f"重复的标注 id: {record.image_id}", invalid_data=record.image_id)
        seen.add(record.image_id)
    return records


def write_annotations(path, records: Sequence[AnnotationRecord]) -> Path:
    return write_jsonl(path, (r.to_dict() for r in records))


def annotations_by_id(records: Sequence[AnnotationRecord]) -> Dict[str, AnnotationRecord]:
    return {r.image_id: r for r in records}


def write_predictions(path, predictions: Mapping[str, Sequence[CropProposal]]) -> Path:
    """预测文件：每行 {"id", "proposals": [{"box", "score"}]}，按 id 排序"""
    rows = (
        {"id": image_id, "proposals": [p.to_dict() for p in predictions[image_id]]}
        for image_id in sorted(predictions)
    )
    path = write_jsonl(path, rows)
    logger.info(f"预测结果已保存: {path}（{len(predictions)} 张图像）")
    return path


def read_predictions(path) -> Dict[str, List[CropProposal]]:
    """读取预测文件，每张图的提议按分数降序（同分保持文件顺序）"""
    predictions: Dict[str, List[CropProposal]] = {}
    for row in read_jsonl(path):
        try:
            image_id = str(row["id"])
            proposals = [CropProposal.from_dict(p) for p in row["proposals"]]
        except (KeyError, TypeError) as e:
            raise DataValidationError(f"无效的预测行: {e}", invalid_data=row)
        if image_id in predictions:
            raise DataValidationError(f"重复的预测 id: {image_id}", invalid_data=image_id)
        order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
        predictions[image_id] = [proposals[i] for i in order]
    return predictions


@dataclass
class CropDataset:
    """数据集目录：annotations.jsonl + images/；存在 manifest.txt 时为弱监督数据集"""
    root: Path
    records: List[AnnotationRecord]
    weak: bool = False
    _images: Dict[str, Path] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        image_dir = self.root / IMAGE_DIR
        if image_dir.is_dir() and not self._images:
            self._images = {
                p.stem: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES
            }

    def __len__(self) -> int:
        return len(self.records)

    @property
    def by_id(self) -> Dict[str, AnnotationRecord]:
        return annotations_by_id(self.records)

    def image_path(self, image_id: str) -> Path:
        if image_id not in self._images:
            raise DataValidationError(f"数据集中找不到图像: {image_id}", invalid_data=image_id)
        return self._images[image_id]


def load_dataset(root) -> CropDataset:
    root = Path(root)
    annotation_file = root / ANNOTATION_FILE
    if not annotation_file.exists():
        raise FileNotFoundError(f"数据集缺少 {ANNOTATION_FILE}: {root}")
    records = read_annotations(annotation_file)
    if not records:
        raise DataValidationError(f"数据集为空: {root}")
    dataset = CropDataset(root=root, records=records, weak=(root / MANIFEST_FILE).exists())
    logger.info(f"数据集加载成功: {root}（{len(records)} 张图像, {'弱监督' if dataset.weak else '人工标注'}）")
    return dataset


class DataExporter:
    """评估报告导出器类"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def iou_disp_frame(self, report: EvalReport) -> pd.DataFrame:
        """IoU_i / Disp_i 表，列为 metric, N=1, N=2, N=3"""
        keys = sorted(report.iou)
        rows = [
            {"metric": "IoU", **{f"N={i}": report.iou[i] for i in keys}},
            {"metric": "Disp", **{f"N={i}": report.disp.get(i, float("nan")) for i in keys}},
        ]
        return pd.DataFrame(rows, columns=["metric"] + [f"N={i}" for i in keys])

    def acc_frame(self, report: EvalReport) -> pd.DataFrame:
        """ACC_{K/N} 表，最后一行为 K=1..4 的平均值"""
        ns = sorted({n for _, n in report.acc})
        ks = sorted({k for k, _ in report.acc})
        rows = [{"K": str(k), **{f"N={n}": report.acc[(k, n)] for n in ns}} for k in ks]
        rows.append({"K": "mean", **{f"N={n}": report.mean_acc.get(n, float("nan")) for n in ns}})
        return pd.DataFrame(rows, columns=["K"] + [f"N={n}" for n in ns])

    def rows_frame(self, report: EvalReport) -> pd.DataFrame:
        keys = sorted(report.iou)
        columns = ["id", "n_pred", "n_ann"] + [f"iou_{i}" for i in keys] + [f"disp_{i}" for i in keys]
        return pd.DataFrame(report.rows, columns=columns)

    @staticmethod
    def _table(df: pd.DataFrame) -> str:
        if df.empty:
            return "  ".join(df.columns)
        return df.to_string(index=False, float_format=FLOAT_FORMAT)

    def report_summary(self, report: EvalReport) -> str:
        """生成人可读的报告摘要，数值保留 4 位小数"""
        sections = [
            f"裁剪评估报告 (eps = {report.eps:.4f})",
            "",
            "[IoU / Disp]",
            self._table(self.iou_disp_frame(report)),
            "",
            "[ACC_K/N]",
            self._table(self.acc_frame(report)),
            "",
            "[逐图明细]",
            self._table(self.rows_frame(report)),
        ]
        return "\n".join(sections) + "\n"

    def report_json(self, report: EvalReport) -> str:
        """报告的机器可读 JSON 形式"""
        return json.dumps(report.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)

    def export_report(self, report: EvalReport, file_path) -> Path:
        """按文件后缀导出报告：.json / .csv / .xlsx / .txt"""
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        suffix = path.suffix.lower()
        try:
            if suffix == ".json":
                path.write_text(self.report_json(report) + "\n", encoding="utf-8")
            elif suffix == ".csv":
                self._metrics_long_frame(report).to_csv(path, index=False, encoding="utf-8-sig")
            elif suffix == ".xlsx":
                with pd.ExcelWriter(path, engine="openpyxl") as writer:
                    self.iou_disp_frame(report).to_excel(writer, sheet_name="IoU_Disp", index=False)
                    self.acc_frame(report).to_excel(writer, sheet_name="ACC", index=False)
                    rows = self.rows_frame(report)
                    if not rows.empty:
                        rows.to_excel(writer, sheet_name="逐图明细", index=False)
            elif suffix == ".txt":
                path.write_text(self.report_summary(report), encoding="utf-8")
            else:
                raise ExportError(f"不支持的报告格式: {suffix}", file_path=str(path))
        except OSError as e:
            raise ExportError(f"报告导出失败: {e}", file_path=str(path))
        self.logger.info(f"报告导出成功: {path}")
        return path

    def _metrics_long_frame(self, report: EvalReport) -> pd.DataFrame:
        rows = [{"metric": f"ACC_{k}/{n}", "value": v} for (k, n), v in sorted(report.acc.items())]
        rows += [{"metric": f"mean_ACC_{n}", "value": v} for n, v in sorted(report.mean_acc.items())]
        rows += [{"metric": f"IoU_{i}", "value": v} for i, v in sorted(report.iou.items())]
        rows += [{"metric": f"Disp_{i}", "value": v} for i, v in sorted(report.disp.items())]
        rows.append({"metric": "eps", "value": report.eps})
        return pd.DataFrame(rows, columns=["metric", "value"])

    def export_table(self, rows: Sequence[Dict], file_path, columns: Optional[List[str]] = None) -> Path:
        """把任意行记录（训练日志、sweep 结果）写成 CSV 或 Excel"""
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        df = pd.DataFrame(list(rows), columns=columns)
        try:
            if path.suffix.lower() == ".xlsx":
                df.to_excel(path, index=False, engine="openpyxl")
            else:
                df.to_csv(path, index=False, float_format="%.6f")
        except OSError as e:
            raise ExportError(f"表格导出失败: {e}", file_path=str(path))
        self.logger.info(f"表格导出成功: {path}（{len(df)} 行）")
        return path

    def table_text(self, rows: Sequence[Dict], columns: Optional[List[str]] = None) -> str:
        return self._table(pd.DataFrame(list(rows), columns=columns))


def report_summary(report: EvalReport) -> str:
    return DataExporter().report_summary(report)
