"""
测试训练循环：监督训练、两阶段弱监督训练、可复现性与数值检查
"""
from dataclasses import replace

import numpy as np
import pytest

from procrop.core.config_manager import ModelConfig
from procrop.core.exceptions import DataValidationError, NumericalError
from procrop.core.models import CropBox
from procrop.services import trainer as trainer_module
from procrop.services.data_exporter import load_dataset, write_annotations
from procrop.services.embedding_store import LineHistogramEncoder, build_index, encode
from procrop.services.image_processor import ImageProcessor
from procrop.services.proposal_model import match_and_loss
from procrop.services.trainer import Trainer, normalized_mos, train
from procrop.services.weakgen import build_weak_dataset, expand_canvas

from .conftest import make_record, textured_image

pytestmark = pytest.mark.unit


def _config(**changes) -> ModelConfig:
    base = ModelConfig(
        n_proposals=3, d_model=8, decoder_layers=1, input_size=16, epochs=20, stage1_epochs=0,
        batch_size=2, learning_rate=1e-2, backbone_learning_rate=1e-3,
        fusion_mode="none", k_retrieve=0, seed=11,
    )
    return replace(base, **changes)


@pytest.fixture
def supervised_dir(tmp_path, rng):
    processor = ImageProcessor()
    root = tmp_path / "data"
    records = []
    for i in range(2):
        image_id = f"img{i}"
        processor.save_image(textured_image(rng, 32, 32), root / "images" / f"{image_id}.png")
        records.append(make_record(
            image_id,
            [((0.1, 0.1, 0.7, 0.8), 4.5), ((0.3, 0.2, 0.9, 0.9), 3.0), ((0.0, 0.0, 1.0, 1.0), 2.0)],
            width=32, height=32,
        ))
    write_annotations(root / "annotations.jsonl", records)
    return root


def test_normalized_mos():
    record = make_record("a", [((0, 0, 1, 1), 1.0), ((0, 0, 0.5, 0.5), 3.0), ((0.5, 0.5, 1, 1), 5.0)])
    assert [t for _, t in normalized_mos(record)] == [0.0, 0.5, 1.0]


def test_normalized_mos_constant():
    record = make_record("a", [((0, 0, 1, 1), 2.0), ((0, 0, 0.5, 0.5), 2.0)])
    assert [t for _, t in normalized_mos(record)] == [1.0, 1.0]


def test_supervised_overfit(supervised_dir):
    result = train(load_dataset(supervised_dir), None, _config())
    losses = result.log.losses
    assert len(losses) == 20
    assert result.model.trained_epochs == 20
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    assert {r.stage for r in result.log.records} == {"supervised"}


def test_same_seed_same_curve(supervised_dir):
    config = _config(epochs=4)
    first = train(load_dataset(supervised_dir), None, config).log.losses
    second = train(load_dataset(supervised_dir), None, config).log.losses
    assert first == second


def test_loss_log_csv(supervised_dir, tmp_path):
    result = train(load_dataset(supervised_dir), None, _config(epochs=3))
    path = tmp_path / "loss.csv"
    result.log.to_csv(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,stage,mean_loss,batches"
    assert len(lines) == 4


def test_non_finite_loss(supervised_dir, monkeypatch):
    original = trainer_module.match_and_loss

    def poisoned(*args, **kwargs):
        loss, assignment = original(*args, **kwargs)
        return loss * float("nan"), assignment

    monkeypatch.setattr(trainer_module, "match_and_loss", poisoned)
    with pytest.raises(NumericalError) as excinfo:
        train(load_dataset(supervised_dir), None, _config(epochs=1))
    assert excinfo.value.batch_id == "epoch0-batch0"


def test_retrieval_mode_requires_index():
    with pytest.raises(DataValidationError):
        Trainer(_config(fusion_mode="concat+CA", k_retrieve=2), None)


def test_index_too_small_after_exclusion(rng):
    encoder = LineHistogramEncoder(grid=2, bins=4)
    index = build_index(
        [encode(textured_image(rng), encoder, name) for name in ("img0", "other")],
        encoder_id="line-hist:2,4",
    )
    trainer = Trainer(_config(fusion_mode="concat+CA", k_retrieve=2), index, encoder_spec="line-hist:2,4")
    with pytest.raises(DataValidationError):
        trainer.make_sample("img0", textured_image(rng, 32, 32), [(CropBox.full(), 1.0)], exclude=("img0",))


def test_retrieval_training_uses_neighbors(supervised_dir, rng):
    encoder = LineHistogramEncoder(grid=2, bins=4)
    index = build_index(
        [encode(textured_image(rng), encoder, f"pro{i}") for i in range(4)], encoder_id="line-hist:2,4"
    )
    trainer = Trainer(_config(fusion_mode="concat+CA", k_retrieve=2, epochs=2), index, encoder_spec="line-hist:2,4")
    samples = trainer.supervised_samples(load_dataset(supervised_dir))
    assert samples[0].retrieved.shape == (2, index.m, index.d)
    trainer.train_epochs(samples, 2, "supervised")
    assert trainer.model.trained_epochs == 2


def test_two_stage_weak_training(rng, small_refine_config):
    pairs = [
        expand_canvas(textured_image(rng, 40, 40), small_refine_config, seed=s, source_id=f"s{s}")
        for s in range(2)
    ]
    config = _config(n_proposals=12, epochs=3, stage1_epochs=1)
    result = train(pairs, None, config, refine_config=small_refine_config)
    stages = [r.stage for r in result.log.records]
    assert stages == ["stage1", "stage2-round1", "stage2-round1"]
    # 第一阶段：每个画布 crops_per_pair 个随机裁剪
    assert result.log.records[0].batches == 2
    assert len(result.pairs) == 2
    for before, after in zip(pairs, result.pairs):
        assert after.pseudo_labels[0].box == before.gt_region
        assert 1 <= len(after.pseudo_labels) <= small_refine_config.labels_per_image


def test_weak_dataset_directory(tmp_path, rng, small_refine_config):
    processor = ImageProcessor()
    src = tmp_path / "src"
    for i in range(2):
        processor.save_image(textured_image(rng, 40, 40), src / f"pro{i}.png")
    build_weak_dataset(src, tmp_path / "weak", small_refine_config, seed=1)
    dataset = load_dataset(tmp_path / "weak")
    assert dataset.weak
    result = train(dataset, None, _config(n_proposals=12, epochs=2, stage1_epochs=1), refine_config=small_refine_config)
    assert result.model.trained_epochs == 2
    assert len(result.pairs) == 4
    assert {p.provenance.source_id for p in result.pairs} == {"pro0", "pro1"}


@pytest.mark.slow
def test_single_sample_overfit(rng):
    label = CropBox(0.2, 0.15, 0.7, 0.85)
    trainer = Trainer(_config(batch_size=1))
    sample = trainer.make_sample("one", textured_image(rng, 32, 32), [(label, 1.0)])
    trainer.train_epochs([sample], 200, "supervised")

    trainer.model.eval()
    output = trainer.model(sample.image[None], None, None)
    _, matching = match_and_loss(output.boxes[0], output.scores[0], [(label, 1.0)])
    matched = output.boxes[0].numpy()[matching.pred_indices[0]]
    assert np.abs(matched - np.array(label.to_list())).mean() < 0.05
