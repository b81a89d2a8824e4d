"""
评估模块
网格锚框候选生成、ACC_{K/N} 系列指标与数据集级 IoU/Disp 报告
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.exceptions import DataValidationError
from ..core.geometry import disp, iou
from ..core.models import AnnotatedCandidate, AnnotationRecord, CropBox, CropProposal, EvalReport, ImageSize
from ..core.utils import derive_seed

logger = logging.getLogger(__name__)

GRID_FRACTIONS = (0.5, 0.6, 0.7, 0.8, 0.9)
OFFSET_STEPS = 3
ASPECT_RANGE = (0.5, 2.0)
AR_TOLERANCE = 1e-9
DEFAULT_EPS = 0.85
ACC_KS = (1, 2, 3, 4)
ACC_NS = (5, 10)
TOP_IS = (1, 2, 3)

Ranked = Sequence[Union[CropProposal, CropBox]]


def aspect_ok(width_fraction: float, height_fraction: float, size: ImageSize) -> bool:
    ratio = (width_fraction * size.width) / (height_fraction * size.height)
    return ASPECT_RANGE[0] - AR_TOLERANCE <= ratio <= ASPECT_RANGE[1] + AR_TOLERANCE


def _fallback_anchor(size: ImageSize) -> CropBox:
    """没有合法的宽高比例组合时，返回居中且宽高比裁剪到边界的框"""
    ratio = size.width / size.height
    if ratio > ASPECT_RANGE[1]:
        w = ASPECT_RANGE[1] / ratio
        return CropBox((1 - w) / 2, 0.0, (1 + w) / 2, 1.0)
    h = ratio / ASPECT_RANGE[0]
    return CropBox(0.0, (1 - h) / 2, 1.0, (1 + h) / 2)


def generate_grid_anchors(size: ImageSize, max_candidates: int = 90) -> List[CropBox]:
    """
    网格锚框：宽、高比例取 {0.5,…,0.9}，每个比例组合在 3×3 均匀位置上放置，
    像素宽高比限制在 [0.5, 2]。每个组合均匀保留 q = clamp(cap // 组合数, 1, 9) 个位置，
    总数仍超过上限时再整体均匀抽样。结果只依赖图像宽高比。
    """
    if max_candidates < 1:
        return []
    pairs = [(fw, fh) for fh in GRID_FRACTIONS for fw in GRID_FRACTIONS if aspect_ok(fw, fh, size)]
    if not pairs:
        return [_fallback_anchor(size)]

    n_offsets = OFFSET_STEPS * OFFSET_STEPS
    per_pair = min(max(max_candidates // len(pairs), 1), n_offsets)
    if per_pair == 1:
        offset_ids = [n_offsets // 2]
    else:
        offset_ids = [int(i) for i in np.round(np.linspace(0, n_offsets - 1, per_pair))]

    boxes = []
    for fw, fh in pairs:
        xs = np.linspace(0.0, 1.0 - fw, OFFSET_STEPS)
        ys = np.linspace(0.0, 1.0 - fh, OFFSET_STEPS)
        for offset_id in offset_ids:
            x, y = float(xs[offset_id % OFFSET_STEPS]), float(ys[offset_id // OFFSET_STEPS])
            boxes.append(CropBox(x, y, min(1.0, x + fw), min(1.0, y + fh)))

    if len(boxes) > max_candidates:
        keep = np.round(np.linspace(0, len(boxes) - 1, max_candidates)).astype(int)
        boxes = [boxes[i] for i in keep]
    return boxes


def is_equivalent(pred: CropBox, ref: CropBox, eps: float = DEFAULT_EPS) -> bool:
    """IoU ≥ ε 视为同一裁剪（闭区间比较）"""
    return iou(pred, ref) >= eps


def _boxes(ranked: Ranked) -> List[CropBox]:
    return [item.box if isinstance(item, CropProposal) else item for item in ranked]


def image_hits(preds: Ranked, record: AnnotationRecord, k: int, n: int, eps: float = DEFAULT_EPS) -> int:
    """
    按预测排名贪心匹配：每个预测取尚未被占用、IoU 最大且 ≥ ε 的 top-N 标注，
    IoU 相同按 MOS 排名靠前者优先；每个标注最多匹配一次
    """
    refs = [c.box for c in record.top_n(n)]
    used = [False] * len(refs)
    hits = 0
    for box in _boxes(preds)[:k]:
        best, best_iou = -1, -1.0
        for j, ref in enumerate(refs):
            if used[j]:
                continue
            overlap = iou(box, ref)
            if overlap >= eps and overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            used[best] = True
            hits += 1
    return hits


def acc_k_n(
    predictions: Mapping[str, Ranked],
    annotations: Mapping[str, AnnotationRecord],
    k: int,
    n: int,
    eps: float = DEFAULT_EPS,
) -> float:
    """ACC_{K/N}：每张图 hits/K 的均值；标注不足 N 或预测不足 K 的图像被排除"""
    if k < 1 or n < 1:
        raise DataValidationError(f"K 与 N 必须 >= 1，得到 K={k}, N={n}")
    values = []
    for image_id in sorted(annotations):
        record = annotations[image_id]
        preds = predictions.get(image_id, [])
        if len(record.crops) < n or len(preds) < k:
            logger.warning(
                f"图像 {image_id} 不参与 ACC_{k}/{n}: 标注 {len(record.crops)} 个, 预测 {len(preds)} 个"
            )
            continue
        values.append(image_hits(preds, record, k, n, eps) / k)
    if not values:
        logger.warning(f"ACC_{k}/{n} 没有可评估的图像，记为 0")
        return 0.0
    return float(np.mean(values))


def mean_acc(
    predictions: Mapping[str, Ranked],
    annotations: Mapping[str, AnnotationRecord],
    n: int,
    eps: float = DEFAULT_EPS,
    ks: Sequence[int] = ACC_KS,
) -> float:
    """K = 1..4 的 ACC_{K/N} 算术平均"""
    return float(np.mean([acc_k_n(predictions, annotations, k, n, eps) for k in ks]))


def best_iou_disp(preds: Ranked, record: AnnotationRecord, top_i: int) -> Tuple[float, float]:
    """前 i 个预测与全部标注之间的最大 IoU 和最小 Disp"""
    boxes = _boxes(preds)[:top_i]
    refs = [c.box for c in record.crops]
    best_iou = max(iou(b, r) for b in boxes for r in refs)
    best_disp = min(disp(b, r) for b in boxes for r in refs)
    return best_iou, best_disp


def evaluate_dataset(
    predictions: Mapping[str, Ranked],
    annotations: Mapping[str, AnnotationRecord],
    eps: float = DEFAULT_EPS,
    ks: Sequence[int] = ACC_KS,
    ns: Sequence[int] = ACC_NS,
    top_is: Sequence[int] = TOP_IS,
) -> EvalReport:
    """数据集级评估：ACC 表、平均 ACC、IoU_i / Disp_i 以及逐图明细"""
    missing = sorted(set(annotations) - set(predictions))
    extra = sorted(set(predictions) - set(annotations))
    if missing or extra:
        raise DataValidationError(
            f"预测与标注的图像 id 不一致: 缺少预测 {missing[:5]}, 多余预测 {extra[:5]}",
            invalid_data={"missing": missing, "extra": extra},
        )

    rows: List[Dict] = []
    iou_values: Dict[int, List[float]] = {i: [] for i in top_is}
    disp_values: Dict[int, List[float]] = {i: [] for i in top_is}
    for image_id in sorted(annotations):
        record = annotations[image_id]
        preds = predictions[image_id]
        row: Dict = {"id": image_id, "n_pred": len(preds), "n_ann": len(record.crops)}
        if not preds or not record.crops:
            logger.warning(f"图像 {image_id} 没有预测或标注，不参与 IoU/Disp")
            rows.append(row)
            continue
        for i in top_is:
            best_iou, best_disp = best_iou_disp(preds, record, i)
            iou_values[i].append(best_iou)
            disp_values[i].append(best_disp)
            row[f"iou_{i}"] = best_iou
            row[f"disp_{i}"] = best_disp
        rows.append(row)

    acc = {(k, n): acc_k_n(predictions, annotations, k, n, eps) for n in ns for k in ks}
    report = EvalReport(
        acc=acc,
        mean_acc={n: float(np.mean([acc[(k, n)] for k in ks])) for n in ns},
        iou={i: float(np.mean(v)) if v else 0.0 for i, v in iou_values.items()},
        disp={i: float(np.mean(v)) if v else 0.0 for i, v in disp_values.items()},
        rows=rows,
        eps=eps,
    )
    logger.info(
        f"评估完成: {len(annotations)} 张图像, IoU_1={report.iou.get(1, 0.0):.4f}, "
        f"Disp_1={report.disp.get(1, 0.0):.4f}"
    )
    return report


def anchor_baseline_predictions(
    annotations: Mapping[str, AnnotationRecord],
    seed: int = 0,
    max_candidates: int = 90,
) -> Dict[str, List[CropProposal]]:
    """随机排序的网格锚框作为基线预测"""
    predictions = {}
    for image_id in sorted(annotations):
        anchors = generate_grid_anchors(annotations[image_id].size, max_candidates)
        rng = np.random.default_rng(derive_seed(seed, f"anchor-baseline:{image_id}"))
        order = rng.permutation(len(anchors))
        predictions[image_id] = [
            CropProposal(box=anchors[j], score=1.0 - rank / len(anchors)) for rank, j in enumerate(order)
        ]
    return predictions


def gt_region_annotations(records: Sequence[AnnotationRecord]) -> Dict[str, AnnotationRecord]:
    """弱监督数据：只用 gt_region 作为唯一标注（原图所在区域即专家裁剪）"""
    result = {}
    for record in records:
        region = record.extras.get("gt_region")
        if region is None:
            raise DataValidationError(f"标注行缺少 gt_region: {record.image_id}", invalid_data=record.image_id)
        result[record.image_id] = AnnotationRecord(
            image_id=record.image_id,
            size=record.size,
            crops=[AnnotatedCandidate(box=CropBox.from_list(region), mos=1.0)],
        )
    return result


def top1_iou(predictions: Mapping[str, Ranked], annotations: Mapping[str, AnnotationRecord]) -> Optional[float]:
    """平均 top-1 IoU（基准对比用）"""
    values = [
        best_iou_disp(predictions[image_id], annotations[image_id], 1)[0]
        for image_id in sorted(annotations)
        if predictions.get(image_id) and annotations[image_id].crops
    ]
    return float(np.mean(values)) if values else None
