"""
测试画布扩展、随机裁剪对、NMS 与伪标签精炼
"""
from dataclasses import replace

import cv2
import numpy as np
import pytest
from scipy import stats

from procrop.core.config_manager import ModelConfig, RefineConfig
from procrop.core.exceptions import DataValidationError, RefinementError
from procrop.core.geometry import contains, iou, reframe, unframe
from procrop.core.models import CropBox, CropProposal, Provenance, WeakPair
from procrop.services.data_exporter import load_dataset, read_annotations
from procrop.services.image_processor import ImageProcessor
from procrop.services.proposal_model import PredictionSession, ProCropModel
from procrop.services.weakgen import (
    build_weak_dataset,
    curate_labels,
    expand_canvas,
    label_statistics,
    max_area_fraction,
    nms,
    pairs_from_dataset,
    refine_labels,
    sample_random_crops,
)

from .conftest import random_box, textured_image

pytestmark = pytest.mark.unit


def _pair(gt=(0.3, 0.3, 0.7, 0.7), size=(100, 100)) -> WeakPair:
    canvas = np.zeros((size[1], size[0], 3), dtype=np.uint8)
    region = CropBox(*gt)
    return WeakPair(
        pair_id="p",
        canvas=canvas,
        gt_region=region,
        pseudo_labels=[CropProposal(box=region, score=1.0)],
        provenance=Provenance(source_id="src", seed=0),
    )


class TestExpandCanvas:

    def test_full_area(self, rng, small_refine_config):
        pair = expand_canvas(textured_image(rng, 48, 64), small_refine_config, seed=1, area=1.0)
        assert pair.gt_region == CropBox.full()
        assert small_refine_config.canvas_min <= pair.size.width <= small_refine_config.canvas_max

    def test_deterministic(self, rng, small_refine_config):
        image = textured_image(rng, 48, 48)
        a = expand_canvas(image, small_refine_config, seed=42)
        b = expand_canvas(image, small_refine_config, seed=42)
        assert a.canvas.tobytes() == b.canvas.tobytes()
        assert a.gt_region == b.gt_region
        assert expand_canvas(image, small_refine_config, seed=43).canvas.tobytes() != a.canvas.tobytes()

    def test_placement_exact(self, rng, small_refine_config):
        image = textured_image(rng, 40, 40)
        pair = expand_canvas(image, small_refine_config, seed=5)
        size = pair.size
        x1, y1 = round(pair.gt_region.x1 * size.width), round(pair.gt_region.y1 * size.height)
        x2, y2 = round(pair.gt_region.x2 * size.width), round(pair.gt_region.y2 * size.height)
        expected = cv2.resize(image, (x2 - x1, y2 - y1), interpolation=cv2.INTER_AREA)
        placed = pair.canvas[y1:y2, x1:x2]
        np.testing.assert_array_equal(placed, expected)
        assert pair.pseudo_labels == [CropProposal(box=pair.gt_region, score=1.0)]

    def test_canvas_sides_in_range(self, rng, small_refine_config):
        image = textured_image(rng, 32, 32)
        for seed in range(20):
            size = expand_canvas(image, small_refine_config, seed=seed).size
            assert small_refine_config.canvas_min <= size.width <= small_refine_config.canvas_max
            assert small_refine_config.canvas_min <= size.height <= small_refine_config.canvas_max

    @pytest.mark.slow
    def test_area_fraction_uniform(self, rng):
        config = RefineConfig(canvas_min=256, canvas_max=384, blur_sigma=1.0, noise_std=0.0)
        image = textured_image(rng, 32, 32)
        fractions = [expand_canvas(image, config, seed=s).gt_region.area for s in range(1000)]
        # 像素取整带来的偏差远小于 KS 检验的分辨率
        result = stats.kstest(fractions, "uniform", args=(0.4, 0.4))
        assert result.pvalue > 0.01

    def test_wide_source_never_dropped(self, rng):
        config = RefineConfig()
        image = textured_image(rng, 64, 128)
        upper = max_area_fraction(2.0, config)
        assert upper == pytest.approx(0.75)
        for seed in range(200):
            pair = expand_canvas(image, config, seed=seed)
            assert config.area_min - 0.02 <= pair.gt_region.area <= upper + 0.02
            assert config.canvas_min <= pair.size.width <= config.canvas_max
            assert config.canvas_min <= pair.size.height <= config.canvas_max

    def test_range_entirely_infeasible(self, small_refine_config):
        # 10:1 的原图最大占比 0.15，低于 area_min
        with pytest.raises(DataValidationError):
            expand_canvas(np.zeros((20, 200, 3), dtype=np.uint8), small_refine_config, seed=0)

    def test_full_area_sides_in_range(self, rng, small_refine_config):
        image = textured_image(rng, 48, 64)
        for seed in range(20):
            size = expand_canvas(image, small_refine_config, seed=seed, area=1.0).size
            assert small_refine_config.canvas_min <= size.width <= small_refine_config.canvas_max
            assert small_refine_config.canvas_min <= size.height <= small_refine_config.canvas_max

    def test_full_area_infeasible_ratio(self, small_refine_config):
        with pytest.raises(DataValidationError):
            expand_canvas(np.zeros((16, 64, 3), dtype=np.uint8), small_refine_config, seed=0, area=1.0)

    def test_small_source_rejected(self, small_refine_config):
        with pytest.raises(DataValidationError):
            expand_canvas(np.zeros((8, 8, 3), dtype=np.uint8), small_refine_config, seed=0)

    def test_infeasible_range(self, small_refine_config):
        config = replace(small_refine_config, area_min=0.9, area_max=1.0)
        wide = np.zeros((20, 200, 3), dtype=np.uint8)
        assert max_area_fraction(10.0, config) < 0.9
        with pytest.raises(DataValidationError):
            expand_canvas(wide, config, seed=0, area=0.95)


class TestRandomCrops:

    def test_full_canvas_keeps_label(self):
        gt = CropBox(0.3, 0.3, 0.7, 0.7)
        assert reframe(gt, CropBox.full()) == gt

    def test_tight_crop(self):
        gt = CropBox(0.3, 0.3, 0.7, 0.7)
        assert reframe(gt, gt).as_tuple() == pytest.approx((0, 0, 1, 1))

    def test_hand_computed_label(self):
        label = reframe(CropBox(0.3, 0.3, 0.7, 0.7), CropBox(0.1, 0.1, 0.9, 0.9))
        assert label.as_tuple() == pytest.approx((0.25, 0.25, 0.75, 0.75))

    def test_crops_contain_gt_and_have_valid_aspect(self, rng, small_refine_config):
        pair = expand_canvas(textured_image(rng, 40, 56), small_refine_config, seed=9)
        crops = sample_random_crops(pair, 30, seed=3)
        assert len(crops) == 30
        for crop, label in crops:
            assert contains(crop, pair.gt_region)
            assert 0.5 - 1e-9 <= crop.aspect_ratio(pair.size) <= 2.0 + 1e-9
            back = unframe(label, crop)
            assert back.as_tuple() == pytest.approx(pair.gt_region.as_tuple(), abs=1e-9)

    def test_pixel_aligned(self, rng, small_refine_config):
        pair = expand_canvas(textured_image(rng, 40, 40), small_refine_config, seed=2)
        size = pair.size
        for crop, _ in sample_random_crops(pair, 10, seed=1):
            assert crop.x1 * size.width == pytest.approx(round(crop.x1 * size.width), abs=1e-6)
            assert crop.y2 * size.height == pytest.approx(round(crop.y2 * size.height), abs=1e-6)

    def test_deterministic(self, rng, small_refine_config):
        pair = expand_canvas(textured_image(rng, 40, 40), small_refine_config, seed=2)
        assert sample_random_crops(pair, 5, seed=8) == sample_random_crops(pair, 5, seed=8)

    def test_fallback_widens_to_valid_aspect(self):
        # 画布 2.5:1，gt 400×20 像素：随机采样必然失败，整张画布也超出宽高比范围
        pair = _pair(gt=(0.1, 0.45, 0.9, 0.55), size=(500, 200))
        for crop, label in sample_random_crops(pair, 3, seed=0):
            assert crop == CropBox(0.1, 0.0, 0.9, 1.0)
            assert contains(crop, pair.gt_region)
            assert crop.aspect_ratio(pair.size) == pytest.approx(2.0)
            assert unframe(label, crop).as_tuple() == pytest.approx(pair.gt_region.as_tuple())

    def test_fallback_impossible(self):
        pair = _pair(gt=(0.1, 0.45, 0.9, 0.55), size=(500, 100))
        with pytest.raises(DataValidationError):
            sample_random_crops(pair, 1, seed=0)

    def test_zero_crops_rejected(self):
        with pytest.raises(DataValidationError):
            sample_random_crops(_pair(), 0, seed=0)


class TestNms:

    def test_output_is_diverse_subset(self, rng):
        proposals = [CropProposal(box=random_box(rng, 0.3), score=float(rng.random())) for _ in range(60)]
        kept = nms(proposals, 0.5)
        assert set(kept) <= set(proposals)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert iou(kept[i].box, kept[j].box) < 0.5
        scores = [p.score for p in kept]
        assert scores == sorted(scores, reverse=True)

    def test_keep_first(self):
        first = CropProposal(box=CropBox(0.2, 0.2, 0.8, 0.8), score=0.1)
        near = CropProposal(box=CropBox(0.2, 0.2, 0.81, 0.8), score=0.9)
        far = CropProposal(box=CropBox(0.0, 0.0, 0.3, 0.3), score=0.5)
        assert nms([first, near, far], 0.8, keep_first=1) == [first, far]

    def test_overlap_equal_to_threshold_suppressed(self):
        left = CropProposal(box=CropBox(0.0, 0.0, 0.75, 1.0), score=0.9)
        right = CropProposal(box=CropBox(0.25, 0.0, 1.0, 1.0), score=0.8)
        assert iou(left.box, right.box) == 0.5
        assert nms([left, right], 0.5) == [left]
        assert nms([left, right], 0.51) == [left, right]

    def test_equal_scores_keep_input_order(self):
        boxes = [CropBox(0.0, 0.0, 0.2, 0.2), CropBox(0.5, 0.5, 0.7, 0.7), CropBox(0.8, 0.0, 1.0, 0.2)]
        proposals = [CropProposal(box=b, score=0.5) for b in boxes]
        assert nms(proposals, 0.5) == proposals

    def test_empty(self):
        assert nms([], 0.5) == []
        assert nms([], 0.5, keep_first=1) == []


class TestCurate:

    def test_gt_always_first(self):
        pair = _pair()
        proposals = [
            CropProposal(box=CropBox(0.1, 0.1, 0.9, 0.9), score=0.9),
            CropProposal(box=CropBox(0.0, 0.0, 0.5, 0.5), score=0.99),
            CropProposal(box=CropBox(0.25, 0.2, 0.75, 0.8), score=0.8),
        ]
        labels = curate_labels(pair, proposals, RefineConfig(labels_per_image=8, diversity_iou=0.8))
        assert labels[0].box == pair.gt_region
        assert all(contains(p.box, pair.gt_region) for p in labels)
        assert CropBox(0.0, 0.0, 0.5, 0.5) not in [p.box for p in labels]

    def test_k_one_keeps_only_gt(self):
        pair = _pair()
        proposals = [CropProposal(box=CropBox(0.1, 0.1, 0.9, 0.9), score=0.9)]
        labels = curate_labels(pair, proposals, RefineConfig(labels_per_image=1))
        assert [p.box for p in labels] == [pair.gt_region]

    def test_aspect_filter(self):
        pair = _pair(gt=(0.3, 0.45, 0.4, 0.55))
        tall = CropProposal(box=CropBox(0.3, 0.0, 0.4, 1.0), score=0.9)
        labels = curate_labels(pair, [tall], RefineConfig())
        assert tall not in labels


class TestRefine:

    @pytest.fixture
    def weak_pairs(self, rng, small_refine_config):
        return [
            expand_canvas(textured_image(rng, 40, 40), small_refine_config, seed=s, source_id=f"s{s}")
            for s in range(3)
        ]

    def _session(self, trained_epochs):
        config = ModelConfig(
            n_proposals=30, d_model=8, decoder_layers=1, input_size=16, epochs=2, stage1_epochs=1,
            fusion_mode="none", k_retrieve=0, seed=4,
        )
        model = ProCropModel(config, retrieval_dim=4)
        model.trained_epochs = trained_epochs
        return PredictionSession(model=model, index=None, k_retrieve=0, encoder_spec="line-hist:2,4")

    def test_untrained_model_rejected(self, weak_pairs, small_refine_config):
        with pytest.raises(RefinementError):
            refine_labels(self._session(0), weak_pairs, small_refine_config)

    def test_labels_contain_gt_and_are_diverse(self, weak_pairs, small_refine_config):
        refined = refine_labels(self._session(1), weak_pairs, small_refine_config)
        assert len(refined) == len(weak_pairs)
        for pair in refined:
            assert pair.pseudo_labels[0].box == pair.gt_region
            assert 1 <= len(pair.pseudo_labels) <= small_refine_config.labels_per_image
        summary = label_statistics(refined)
        assert summary["all_contain_gt"]
        assert summary["max_pairwise_iou"] < small_refine_config.diversity_iou

    def test_k_one(self, weak_pairs, small_refine_config):
        config = replace(small_refine_config, labels_per_image=1)
        refined = refine_labels(self._session(1), weak_pairs, config)
        assert all([p.box for p in pair.pseudo_labels] == [pair.gt_region] for pair in refined)


class TestBuildWeakDataset:

    @pytest.fixture
    def source_dir(self, tmp_path, rng):
        processor = ImageProcessor()
        src = tmp_path / "src"
        for i in range(10):
            processor.save_image(textured_image(rng, 40, 48), src / f"pro{i:02d}.png")
        (src / "broken.png").write_bytes(b"not an image")
        return src

    def test_counts_and_format(self, tmp_path, source_dir, small_refine_config):
        dataset = build_weak_dataset(source_dir, tmp_path / "weak", small_refine_config, seed=7)
        assert len(dataset.pairs) == 20
        assert dataset.skipped == ["broken"]
        records = read_annotations(tmp_path / "weak" / "annotations.jsonl")
        assert len(records) == 20
        assert all(r.extras["gt_region"] == r.crops[0].box.to_list() for r in records)
        assert len(list((tmp_path / "weak" / "images").glob("*.png"))) == 20

    def test_manifest_reproducible(self, tmp_path, source_dir, small_refine_config):
        build_weak_dataset(source_dir, tmp_path / "one", small_refine_config, seed=7)
        build_weak_dataset(source_dir, tmp_path / "two", small_refine_config, seed=7, workers=3)
        one = (tmp_path / "one" / "manifest.txt").read_bytes()
        assert one == (tmp_path / "two" / "manifest.txt").read_bytes()
        assert b"config_hash=" in one
        build_weak_dataset(source_dir, tmp_path / "three", small_refine_config, seed=8)
        assert one != (tmp_path / "three" / "manifest.txt").read_bytes()

    def test_reload_pairs(self, tmp_path, source_dir, small_refine_config):
        dataset = build_weak_dataset(source_dir, tmp_path / "weak", small_refine_config, seed=7)
        loaded = load_dataset(tmp_path / "weak")
        assert loaded.weak
        pairs = pairs_from_dataset(loaded)
        by_id = {p.pair_id: p for p in dataset.pairs}
        for pair in pairs:
            original = by_id[pair.pair_id]
            np.testing.assert_array_equal(pair.canvas, original.canvas)
            assert pair.gt_region == original.gt_region
            assert pair.provenance == original.provenance

    def test_empty_source(self, tmp_path, small_refine_config):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataValidationError):
            build_weak_dataset(tmp_path / "empty", tmp_path / "out", small_refine_config, seed=0)

    def test_wide_sources_kept(self, tmp_path, rng):
        src = tmp_path / "wide"
        for i in range(5):
            ImageProcessor().save_image(textured_image(rng, 64, 128), src / f"pano{i}.png")
        dataset = build_weak_dataset(src, tmp_path / "out", RefineConfig(), seed=3)
        assert dataset.skipped == []
        assert len(dataset.pairs) == 10
