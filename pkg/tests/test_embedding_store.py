"""
测试构图嵌入编码、索引持久化与 top-K 检索
"""
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pytest

from procrop.core.exceptions import DataValidationError, DimensionMismatchError, EmbeddingError, IndexFormatError
from procrop.core.models import EmbeddingRecord
from procrop.services.embedding_store import (
    CACHE_MAGIC,
    DEFAULT_K,
    EmbeddingCache,
    EmbeddingIndex,
    FileEmbeddingEncoder,
    LineHistogramEncoder,
    build_index,
    encode,
    parse_encoder_spec,
    read_embedding_cache,
    swap_index,
    write_embedding_cache,
)

from .conftest import step_image

pytestmark = pytest.mark.unit


@dataclass(frozen=True)
class FakeSession:
    index: Optional[EmbeddingIndex]
    retrieval_dim: int


def brute_force_ids(records, query_tokens, k, exclude=()):
    """独立的余弦暴力扫描"""
    q = query_tokens.astype(np.float64).mean(axis=0)
    scored = []
    for record in records:
        if record.image_id in exclude:
            continue
        v = record.tokens.astype(np.float64).mean(axis=0)
        sim = float(v @ q / (np.linalg.norm(v) * np.linalg.norm(q)))
        scored.append((-sim, record.image_id))
    return [image_id for _, image_id in sorted(scored)[:k]]


class TestLineHistogramEncoder:

    def test_constant_gray_gives_equal_rows(self):
        image = np.full((64, 64, 3), 128, dtype=np.uint8)
        tokens = LineHistogramEncoder(grid=4, bins=8).encode_tokens(image)
        assert tokens.shape == (16, 8)
        assert np.allclose(tokens, tokens[0])

    def test_vertical_edge_mass_in_center_columns(self):
        tokens = LineHistogramEncoder(grid=4, bins=8).encode_tokens(step_image(64, 32))
        mass = tokens.sum(axis=1).reshape(4, 4)
        assert mass[:, 1:3].sum() >= 0.9 * mass.sum()

    def test_edge_shift_moves_mass_by_one_column(self):
        encoder = LineHistogramEncoder(grid=4, bins=8)
        left = encoder.encode_tokens(step_image(64, 32)).reshape(4, 4, 8)
        right = encoder.encode_tokens(step_image(64, 48)).reshape(4, 4, 8)
        assert np.allclose(left[:, :3], right[:, 1:], atol=1e-6)

    def test_spec_parsing(self):
        encoder = parse_encoder_spec("line-hist:4,6")
        assert isinstance(encoder, LineHistogramEncoder)
        assert (encoder.grid, encoder.bins) == (4, 6)
        assert encoder.encoder_id == "line-hist:4,6"
        assert isinstance(parse_encoder_spec("file:emb.bin"), FileEmbeddingEncoder)
        with pytest.raises(DataValidationError):
            parse_encoder_spec("clip:vit")
        with pytest.raises(DataValidationError):
            parse_encoder_spec("line-hist:4")

    def test_empty_image_rejected(self):
        with pytest.raises(DataValidationError):
            encode(np.zeros((0, 0, 3), dtype=np.uint8), LineHistogramEncoder())


class TestFileEncoder:

    def test_cache_file_round_trip(self, tmp_path, toy_records):
        path = tmp_path / "emb.bin"
        write_embedding_cache(path, toy_records)
        record = encode(None, FileEmbeddingEncoder(str(path)), "ref03")
        np.testing.assert_array_equal(record.tokens, toy_records[3].tokens)

    def test_npy_file(self, tmp_path, rng):
        tokens = rng.random((5, 3)).astype(np.float32)
        path = tmp_path / "one.npy"
        np.save(path, tokens)
        record = encode(None, f"file:{path}", "x")
        np.testing.assert_array_equal(record.tokens, tokens)

    def test_missing_id(self, tmp_path, toy_records):
        path = tmp_path / "emb.bin"
        write_embedding_cache(path, toy_records)
        with pytest.raises(EmbeddingError):
            encode(None, FileEmbeddingEncoder(str(path)), "nope")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTANINDEX")
        with pytest.raises(IndexFormatError):
            read_embedding_cache(path)

    def test_invalid_utf8_id(self, tmp_path):
        path = tmp_path / "bad_id.bin"
        path.write_bytes(
            CACHE_MAGIC + struct.pack("<III", 1, 1, 2) + struct.pack("<H", 2) + b"\xff\xfe"
            + np.zeros(2, dtype="<f4").tobytes()
        )
        with pytest.raises(IndexFormatError):
            read_embedding_cache(path)


class TestEmbeddingCache:

    def test_second_call_reads_from_disk(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "cache")
        encoder = LineHistogramEncoder(grid=4, bins=8)
        image = step_image(64, 20)
        first = cache.encode(image, encoder, "a")
        files = list((tmp_path / "cache").glob("*.npy"))
        assert len(files) == 1
        second = cache.encode(image, encoder, "b")
        np.testing.assert_array_equal(first.tokens, second.tokens)
        assert second.image_id == "b"


class TestEmbeddingIndex:

    def test_build_metadata(self, toy_records):
        index = build_index(toy_records[:3], encoder_id="test")
        assert len(index) == 3
        assert (index.m, index.d) == (4, 8)
        assert index.metadata.encoder_id == "test"

    def test_default_k(self):
        assert DEFAULT_K == 10

    def test_toy_ordering(self):
        s = 1 / math.sqrt(2)
        records = [
            EmbeddingRecord("e1", np.array([[1.0, 0.0]])),
            EmbeddingRecord("e2", np.array([[0.0, 1.0]])),
            EmbeddingRecord("mixed", np.array([[s, s]])),
        ]
        index = build_index(records)
        result = index.retrieve(EmbeddingRecord("q", np.array([[1.0, 0.0]])), k=3)
        assert result.ids == ["e1", "mixed", "e2"]
        assert result.similarities == pytest.approx([1.0, s, 0.0], abs=1e-6)

    def test_self_retrieval(self, toy_records):
        index = build_index(toy_records)
        result = index.retrieve(toy_records[5], k=3)
        assert result.ids[0] == "ref05"
        assert result.similarities[0] == pytest.approx(1.0, abs=1e-6)

    def test_exclude_self(self, toy_records):
        index = build_index(toy_records)
        result = index.retrieve(toy_records[5], k=3, exclude_ids=["ref05"])
        assert "ref05" not in result.ids
        assert result.k == 3

    def test_matches_brute_force(self, rng):
        records = [EmbeddingRecord(f"r{i:04d}", rng.random((4, 6))) for i in range(300)]
        index = build_index(records)
        for _ in range(20):
            query = EmbeddingRecord("q", rng.random((4, 6)))
            assert index.retrieve(query, k=10).ids == brute_force_ids(records, query.tokens, 10)

    def test_k_plus_one_extends_k(self, rng, toy_records):
        index = build_index(toy_records)
        query = EmbeddingRecord("q", rng.random((4, 8)))
        for k in range(1, len(toy_records)):
            assert index.retrieve(query, k + 1).ids[:k] == index.retrieve(query, k).ids

    def test_ties_broken_by_id(self):
        tokens = np.array([[1.0, 2.0]])
        records = [EmbeddingRecord(name, tokens) for name in ("c", "a", "b")]
        result = build_index(records).retrieve(EmbeddingRecord("q", tokens), k=3)
        assert result.ids == ["a", "b", "c"]

    def test_k_larger_than_index(self, toy_records):
        result = build_index(toy_records[:3]).retrieve(toy_records[0], k=10)
        assert result.k == 3

    def test_dimension_mismatch(self, toy_records, rng):
        index = build_index(toy_records)
        with pytest.raises(DimensionMismatchError):
            index.retrieve(EmbeddingRecord("q", rng.random((4, 5))), k=2)

    def test_duplicate_ids_rejected(self, rng):
        records = [EmbeddingRecord("same", rng.random((2, 2))) for _ in range(2)]
        with pytest.raises(DataValidationError):
            build_index(records)

    def test_mixed_shapes_rejected(self, rng):
        records = [EmbeddingRecord("a", rng.random((2, 3))), EmbeddingRecord("b", rng.random((3, 3)))]
        with pytest.raises(DimensionMismatchError):
            build_index(records)

    def test_token_similarity_self_retrieval(self, toy_records):
        index = build_index(toy_records, similarity="token")
        result = index.retrieve(toy_records[2], k=2)
        assert result.ids[0] == "ref02"
        assert result.similarities[0] == pytest.approx(1.0, abs=1e-6)

    def test_save_load_bit_exact(self, tmp_path, toy_records):
        index = build_index(toy_records, encoder_id="line-hist:2,4", build_timestamp="2026-01-01T00:00:00Z")
        path = index.save(tmp_path / "index.bin")
        loaded = EmbeddingIndex.load(path)
        assert loaded.ids == index.ids
        assert loaded.metadata == index.metadata
        for a, b in zip(loaded.records, index.records):
            np.testing.assert_array_equal(a.tokens, b.tokens)


class TestSwapIndex:

    def test_swap_to_copy_keeps_neighbors(self, tmp_path, toy_records):
        index = build_index(toy_records)
        copy = EmbeddingIndex.load(index.save(tmp_path / "copy.bin"))
        session = swap_index(FakeSession(index=index, retrieval_dim=8), copy)
        assert session.index is copy
        query = toy_records[1]
        assert copy.retrieve(query, 4).ids == index.retrieve(query, 4).ids

    def test_disjoint_indices_give_disjoint_neighbors(self, rng):
        first = build_index([EmbeddingRecord(f"a{i}", rng.random((4, 8))) for i in range(6)])
        second = build_index([EmbeddingRecord(f"b{i}", rng.random((4, 8))) for i in range(6)])
        session = FakeSession(index=first, retrieval_dim=8)
        query = EmbeddingRecord("q", rng.random((4, 8)))
        before = set(session.index.retrieve(query, 3).ids)
        after = set(swap_index(session, second).index.retrieve(query, 3).ids)
        assert before.isdisjoint(after)

    def test_dimension_mismatch_rejected(self, rng, toy_records):
        other = build_index([EmbeddingRecord("x", rng.random((4, 5)))])
        with pytest.raises(DimensionMismatchError):
            swap_index(FakeSession(index=build_index(toy_records), retrieval_dim=8), other)
