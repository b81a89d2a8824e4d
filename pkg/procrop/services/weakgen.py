"""
弱监督数据生成模块
画布扩展（镜像延拓 + 高斯模糊 + 低幅噪声的程序化外扩）、随机裁剪对采样、
以及模型参与的动态排序伪标签精炼
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import paddle

from ..core.config_manager import RefineConfig
from ..core.exceptions import DataValidationError, ImageLoadError, RefinementError
from ..core.geometry import contains, iou, reframe, to_pixels
from ..core.models import CropBox, CropProposal, ImageSize, Provenance, WeakPair
from ..core.utils import canonical_hash, derive_seed, image_id_from_path, list_images, sha256_bytes
from .data_exporter import ANNOTATION_FILE, IMAGE_DIR, MANIFEST_FILE, CropDataset, write_annotations
from .evaluation import ASPECT_RANGE, AR_TOLERANCE
from .image_processor import ImageProcessor
from .proposal_model import predict

logger = logging.getLogger(__name__)

MIN_SOURCE_SIDE = 16
CROP_TRIES = 200
NMS_SCALE = 10000.0
NMS_MARGIN = 1e-5
MANIFEST_HEADER = "procrop-weak-manifest v1"


def _aspect_in_range(box: CropBox, size: ImageSize) -> bool:
    ratio = box.aspect_ratio(size)
    return ASPECT_RANGE[0] - AR_TOLERANCE <= ratio <= ASPECT_RANGE[1] + AR_TOLERANCE


def max_area_fraction(image_ratio: float, config: RefineConfig) -> float:
    """给定原图宽高比，画布尺寸范围内能达到的最大面积占比"""
    lo = config.canvas_min / config.canvas_max
    hi = config.canvas_max / config.canvas_min
    canvas_ratio = min(max(image_ratio, lo), hi)
    return min(canvas_ratio / image_ratio, image_ratio / canvas_ratio)


def _surround(placed: np.ndarray, canvas_hw: Tuple[int, int], offset: Tuple[int, int], config: RefineConfig, rng) -> np.ndarray:
    """镜像延拓到整张画布后模糊并加噪"""
    height, width = canvas_hw
    oy, ox = offset
    ph, pw = placed.shape[:2]
    padded = np.pad(
        placed,
        ((oy, height - oy - ph), (ox, width - ox - pw), (0, 0)),
        mode="symmetric",
    )
    blurred = cv2.GaussianBlur(padded, (0, 0), sigmaX=config.blur_sigma).astype(np.float64)
    noise = rng.normal(0.0, config.noise_std, size=blurred.shape) if config.noise_std > 0 else 0.0
    return np.clip(np.rint(blurred + noise), 0, 255).astype(np.uint8)


def _full_canvas_widths(ratio: float, config: RefineConfig) -> List[int]:
    """整张原图作为画布时，两边都落在 [canvas_min, canvas_max] 内的宽度"""
    return [
        w for w in range(config.canvas_min, config.canvas_max + 1)
        if config.canvas_min <= int(round(w / ratio)) <= config.canvas_max
    ]


def _canvas_for_fraction(ratio: float, fraction: float, config: RefineConfig, rng) -> Tuple[int, int]:
    """
    采样能以宽高比 ratio、面积占比 fraction 放下原图的画布尺寸：
    画布宽高比 c = w/h 需满足 fraction·ratio <= c <= ratio/fraction
    """
    options = []
    for w in range(config.canvas_min, config.canvas_max + 1):
        h_lo = max(config.canvas_min, math.ceil(w * fraction / ratio - 1e-9))
        h_hi = min(config.canvas_max, math.floor(w / (fraction * ratio) + 1e-9))
        if h_lo <= h_hi:
            options.append((w, h_lo, h_hi))
    if not options:
        raise DataValidationError(
            f"面积占比 {fraction:.3f} 对宽高比 {ratio:.3f} 的原图不可行"
            f"（画布 {config.canvas_min}–{config.canvas_max}）",
            invalid_data={"ratio": ratio, "fraction": fraction},
        )
    width, h_lo, h_hi = options[int(rng.integers(0, len(options)))]
    return width, int(rng.integers(h_lo, h_hi + 1))


def expand_canvas(
    image: np.ndarray,
    config: RefineConfig,
    seed: int,
    source_id: str = "source",
    pair_id: Optional[str] = None,
    area: Optional[float] = None,
) -> WeakPair:
    """
    把专业图像缩小后放到更大的画布上，周围用程序化外扩填充；
    gt_region 精确记录原图在画布上的位置

    area 为 None 时面积占比在 [area_min, min(area_max, 可行上限)] 内均匀采样，
    可行上限低于 area_min 时该原图无法使用
    """
    if image is None or image.ndim < 2 or min(image.shape[:2]) < MIN_SOURCE_SIDE:
        raise DataValidationError(
            f"原图至少需要 {MIN_SOURCE_SIDE}×{MIN_SOURCE_SIDE}: {source_id}",
            invalid_data=None if image is None else image.shape,
        )
    if image.ndim == 2:
        image = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)

    rng = np.random.default_rng(seed)
    src_h, src_w = image.shape[:2]
    ratio = src_w / src_h
    feasible = max_area_fraction(ratio, config)
    if area is not None:
        fraction = float(area)
    else:
        upper = min(config.area_max, feasible)
        if upper < config.area_min:
            raise DataValidationError(
                f"面积占比范围 [{config.area_min}, {config.area_max}] 对宽高比 {ratio:.3f} 的原图不可行"
                f"（最大可行占比 {feasible:.3f}）",
                invalid_data={"source": source_id, "max_fraction": feasible},
            )
        fraction = float(rng.uniform(config.area_min, upper))

    if fraction >= 1.0:
        widths = _full_canvas_widths(ratio, config)
        if not widths:
            raise DataValidationError(
                f"宽高比 {ratio:.3f} 的原图无法整张缩放到画布范围 {config.canvas_min}–{config.canvas_max}",
                invalid_data={"source": source_id, "fraction": fraction},
            )
        width = widths[int(rng.integers(0, len(widths)))]
        height = int(round(width / ratio))
        canvas = cv2.resize(image, (width, height), interpolation=cv2.INTER_AREA)
        gt_region = CropBox.full()
    else:
        if fraction > feasible + 1e-12:
            raise DataValidationError(
                f"面积占比 {fraction:.3f} 对宽高比 {ratio:.3f} 的原图不可行"
                f"（画布 {config.canvas_min}–{config.canvas_max}）",
                invalid_data={"source": source_id, "fraction": fraction},
            )
        width, height = _canvas_for_fraction(ratio, fraction, config, rng)
        ph = max(1, min(height, int(round(math.sqrt(fraction * width * height / ratio)))))
        pw = max(1, min(width, int(round(ph * ratio))))
        ox = int(rng.integers(0, width - pw + 1))
        oy = int(rng.integers(0, height - ph + 1))
        placed = cv2.resize(image, (pw, ph), interpolation=cv2.INTER_AREA)
        canvas = _surround(placed, (height, width), (oy, ox), config, rng)
        canvas[oy:oy + ph, ox:ox + pw] = placed
        gt_region = CropBox(ox / width, oy / height, (ox + pw) / width, (oy + ph) / height)

    return WeakPair(
        pair_id=pair_id or source_id,
        canvas=canvas,
        gt_region=gt_region,
        pseudo_labels=[CropProposal(box=gt_region, score=1.0)],
        provenance=Provenance(source_id=source_id, seed=int(seed)),
    )


def _snap(value: float, pixels: int, outward_low: bool) -> float:
    """对齐到像素网格；下边界向下取整、上边界向上取整，保持对 gt_region 的包含"""
    scaled = value * pixels
    snapped = math.floor(scaled + 1e-9) if outward_low else math.ceil(scaled - 1e-9)
    return min(max(snapped, 0), pixels) / pixels


def _widen_to_aspect(box: CropBox, size: ImageSize) -> CropBox:
    """
    沿不足的一边对称扩展（像素对齐、夹在画布内），得到包含 box 且宽高比在 [0.5, 2] 内的裁剪
    画布本身放不下时报错
    """
    lo, hi = ASPECT_RANGE
    x1, y1, x2, y2 = to_pixels(box, size)
    w, h = x2 - x1, y2 - y1
    if w > hi * h:
        target = math.ceil(w / hi)
        if target > size.height:
            raise DataValidationError(f"画布高度 {size.height} 放不下宽高比合法的裁剪", invalid_data=box.as_tuple())
        y1 = min(max(math.floor((y1 + y2 - target) / 2 + 0.5), 0), size.height - target)
        y2 = y1 + target
    elif w < lo * h:
        target = math.ceil(h * lo)
        if target > size.width:
            raise DataValidationError(f"画布宽度 {size.width} 放不下宽高比合法的裁剪", invalid_data=box.as_tuple())
        x1 = min(max(math.floor((x1 + x2 - target) / 2 + 0.5), 0), size.width - target)
        x2 = x1 + target
    return CropBox(x1 / size.width, y1 / size.height, x2 / size.width, y2 / size.height)


def sample_random_crops(pair: WeakPair, n: int, seed: int) -> List[Tuple[CropBox, CropBox]]:
    """
    在画布上采样 n 个包含 gt_region 的随机裁剪（宽高比 [0.5, 2]，像素对齐），
    返回 (裁剪框, 以裁剪框为坐标系的 gt_region) 列表
    """
    if n < 1:
        raise DataValidationError(f"裁剪数量必须 >= 1，得到 {n}", invalid_data=n)
    size = pair.size
    g = pair.gt_region
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n):
        crop = None
        for _ in range(CROP_TRIES):
            candidate = CropBox(
                _snap(rng.uniform(0.0, g.x1), size.width, True),
                _snap(rng.uniform(0.0, g.y1), size.height, True),
                _snap(rng.uniform(g.x2, 1.0), size.width, False),
                _snap(rng.uniform(g.y2, 1.0), size.height, False),
            )
            if _aspect_in_range(candidate, size):
                crop = candidate
                break
        if crop is None:
            full = CropBox.full()
            crop = full if _aspect_in_range(full, size) else _widen_to_aspect(g, size)
            logger.debug(f"{pair.pair_id}: 随机裁剪宽高比采样失败，退回 {crop.as_tuple()}")
        results.append((crop, reframe(g, crop)))
    return results


def nms(proposals: Sequence[CropProposal], iou_threshold: float, keep_first: int = 0) -> List[CropProposal]:
    """
    非极大值抑制（paddle.vision.ops.nms）：按分数降序保留与已保留框 IoU 均小于阈值的提议；
    前 keep_first 个提议无条件保留且排在最前，并抑制与其重叠的其余提议（keep_first 个提议之间需互不重叠）
    分数相同时按输入顺序
    """
    if not proposals:
        return []
    head = list(proposals[:keep_first])
    rest = list(proposals[keep_first:])
    ordered = head + [rest[i] for i in sorted(range(len(rest)), key=lambda i: (-rest[i].score, i))]
    boxes = paddle.to_tensor(
        [[p.box.x1, p.box.y1, p.box.x2, p.box.y2] for p in ordered], dtype="float32"
    ) * NMS_SCALE
    # 未传 scores 时按输入顺序视为已排序；paddle 在 IoU > 阈值时抑制，减去 NMS_MARGIN 使 IoU == 阈值也被抑制
    keep = paddle.vision.ops.nms(boxes, iou_threshold=iou_threshold - NMS_MARGIN).numpy().tolist()
    return head + [ordered[j] for j in sorted(keep) if j >= keep_first]


def curate_labels(
    pair: WeakPair,
    proposals: Sequence[CropProposal],
    config: RefineConfig,
) -> List[CropProposal]:
    """筛选（包含 gt_region、宽高比合法）→ 与已有标签合并 → NMS → 保留 top-k，gt_region 始终为第 1 个"""
    size = pair.size
    gt = CropProposal(box=pair.gt_region, score=1.0)
    valid = [p for p in proposals if contains(p.box, pair.gt_region) and _aspect_in_range(p.box, size)]
    existing = [p for p in pair.pseudo_labels if p.box != pair.gt_region]
    merged = nms([gt] + existing + valid, config.diversity_iou, keep_first=1)
    return merged[:config.labels_per_image]


def refine_labels(session, dataset: Sequence[WeakPair], config: RefineConfig) -> List[WeakPair]:
    """
    一轮动态排序：用模型在每张画布上预测提议，筛选并去冗余后作为新的伪标签
    session 为 proposal_model.PredictionSession，模型需完成第一阶段训练
    """
    model = session.model
    required = max(1, model.config.stage1_epochs)
    if model.trained_epochs < required:
        raise RefinementError(
            f"模型仅训练了 {model.trained_epochs} 轮，伪标签精炼要求至少完成第一阶段（{required} 轮）"
        )
    refined = []
    for pair in dataset:
        proposals = predict(
            session,
            pair.canvas,
            image_id=pair.pair_id,
            exclude_ids=(pair.provenance.source_id, pair.pair_id),
        )
        refined.append(replace(pair, pseudo_labels=curate_labels(pair, proposals, config)))
    if refined:
        mean_labels = sum(len(p.pseudo_labels) for p in refined) / len(refined)
        logger.info(f"伪标签精炼完成: {len(refined)} 个样本, 平均 {mean_labels:.2f} 个标签")
    return refined


# ----------------------------------------------------------------------------
# 数据集生成与读写
# ----------------------------------------------------------------------------

@dataclass
class WeakDataset:
    pairs: List[WeakPair]
    seed: int
    config_hash: str
    skipped: List[str] = field(default_factory=list)

    def manifest_text(self) -> str:
        lines = [
            MANIFEST_HEADER,
            f"seed={self.seed}",
            f"config_hash={self.config_hash}",
            f"pairs={len(self.pairs)}",
            f"skipped={','.join(self.skipped)}",
        ]
        for pair in self.pairs:
            lines.append(
                f"pair {pair.pair_id} source={pair.provenance.source_id} "
                f"seed={pair.provenance.seed} sha256={canvas_digest(pair.canvas)}"
            )
        return "\n".join(lines) + "\n"


def canvas_digest(canvas: np.ndarray) -> str:
    return sha256_bytes(repr(canvas.shape).encode() + np.ascontiguousarray(canvas).tobytes())


def weak_config_hash(config: RefineConfig) -> str:
    return canonical_hash(asdict(config))


def _generate_for_source(path: Path, config: RefineConfig, seed: int, processor: ImageProcessor) -> Tuple[str, List[WeakPair], Optional[str]]:
    source_id = image_id_from_path(path)
    try:
        image = processor.load_image(path)
        pairs = []
        for c in range(config.canvases_per_source):
            pair_seed = derive_seed(seed, f"weakgen:{source_id}:{c}")
            pairs.append(expand_canvas(image, config, pair_seed, source_id, pair_id=f"{source_id}_{c:02d}"))
        return source_id, pairs, None
    except (ImageLoadError, DataValidationError) as e:
        return source_id, [], str(e)


def build_weak_dataset(
    source_dir,
    out_dir,
    config: RefineConfig,
    seed: int,
    workers: int = 1,
) -> WeakDataset:
    """从专业图像目录生成弱监督数据集：images/*.png、annotations.jsonl、manifest.txt"""
    sources = list_images(source_dir)
    if not sources:
        raise DataValidationError(f"源目录中没有图像: {source_dir}")
    processor = ImageProcessor()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda p: _generate_for_source(p, config, seed, processor), sources))

    pairs: List[WeakPair] = []
    skipped: List[str] = []
    for source_id, source_pairs, error in results:
        if error is not None:
            logger.warning(f"跳过源图像 {source_id}: {error}")
            skipped.append(source_id)
            continue
        pairs.extend(source_pairs)
    if not pairs:
        raise DataValidationError(f"没有可用的源图像: {source_dir}")

    dataset = WeakDataset(pairs=pairs, seed=seed, config_hash=weak_config_hash(config), skipped=skipped)
    save_weak_dataset(dataset, out_dir, processor)
    logger.info(f"弱监督数据生成完成: {len(sources)} 张源图像 → {len(pairs)} 个样本, 跳过 {len(skipped)} 张")
    return dataset


def save_weak_dataset(dataset: WeakDataset, out_dir, processor: Optional[ImageProcessor] = None) -> Path:
    out_dir = Path(out_dir)
    processor = processor or ImageProcessor()
    for pair in dataset.pairs:
        processor.save_image(pair.canvas, out_dir / IMAGE_DIR / f"{pair.pair_id}.png")
    write_annotations(out_dir / ANNOTATION_FILE, [p.to_annotation() for p in dataset.pairs])
    (out_dir / MANIFEST_FILE).write_text(dataset.manifest_text(), encoding="utf-8")
    return out_dir


def pairs_from_dataset(dataset: CropDataset, processor: Optional[ImageProcessor] = None) -> List[WeakPair]:
    """把磁盘上的弱监督数据集还原成 WeakPair 列表（标注中的 mos 即伪标签分数）"""
    processor = processor or ImageProcessor()
    pairs = []
    for record in dataset.records:
        region = record.extras.get("gt_region")
        if region is None:
            raise DataValidationError(f"弱监督标注缺少 gt_region: {record.image_id}", invalid_data=record.image_id)
        gt_region = CropBox.from_list(region)
        labels = [CropProposal(box=c.box, score=c.mos) for c in record.crops]
        if not labels or labels[0].box != gt_region:
            labels = [CropProposal(box=gt_region, score=1.0)] + [p for p in labels if p.box != gt_region]
        pairs.append(WeakPair(
            pair_id=record.image_id,
            canvas=processor.load_image(dataset.image_path(record.image_id)),
            gt_region=gt_region,
            pseudo_labels=labels,
            provenance=Provenance(
                source_id=str(record.extras.get("source", record.image_id)),
                seed=int(record.extras.get("seed", 0)),
            ),
        ))
    return pairs


def label_statistics(pairs: Sequence[WeakPair]) -> Dict[str, float]:
    """伪标签统计：平均标签数、最大两两 IoU、包含关系是否全部成立"""
    if not pairs:
        return {"pairs": 0, "mean_labels": 0.0, "max_pairwise_iou": 0.0, "all_contain_gt": True}
    max_pairwise = 0.0
    all_contain = True
    for pair in pairs:
        boxes = [p.box for p in pair.pseudo_labels]
        all_contain &= all(contains(b, pair.gt_region) for b in boxes)
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                max_pairwise = max(max_pairwise, iou(boxes[i], boxes[j]))
    return {
        "pairs": len(pairs),
        "mean_labels": float(np.mean([len(p.pseudo_labels) for p in pairs])),
        "max_pairwise_iou": max_pairwise,
        "all_contain_gt": bool(all_contain),
    }
