"""Encoder determinism, oracle-factor separation, embedding file round trip."""

import math

import numpy as np
import pytest

from varidiff.data import Corpus, ImageConfig, build_corpus
from varidiff.encoders import (
    EmbeddingTable,
    EncoderSpec,
    Factors,
    cosine_similarity,
    encode,
    encode_batch,
    precompute_embeddings,
)
from varidiff import fileio


@pytest.fixture(scope="module")
def corpus():
    images, episodes = build_corpus(20, 3, ImageConfig(), seed=42)
    return Corpus(images, episodes)


VIT = EncoderSpec(kind="frozen-random-vit", seed=7, patch_size=4, t_c=16, d_c=32)
ORACLE = EncoderSpec(kind="oracle-factor", t_c=16, d_c=32)


class TestCosineSimilarity:
    def test_self_is_one(self):
        v = np.array([0.3, -1.2, 4.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_negation_is_minus_one(self):
        v = np.array([1.0, 2.0])
        assert cosine_similarity(v, -v) == pytest.approx(-1.0)

    def test_closed_form_value(self):
        got = cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        assert got == pytest.approx(math.sqrt(2.0) / 2.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.ones(3), np.ones(4))


class TestFrozenRandomVit:
    def test_identical_images_identical_tokens(self, corpus):
        a = encode(VIT, corpus.images[0])
        b = encode(VIT, corpus.images[0])
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.cls, b.cls)
        assert cosine_similarity(a.cls, b.cls) == pytest.approx(1.0)

    def test_same_seed_bit_identical_across_instances(self, corpus):
        spec2 = EncoderSpec(kind="frozen-random-vit", seed=7, patch_size=4, t_c=16, d_c=32)
        a = encode(VIT, corpus.images[3])
        b = encode(spec2, corpus.images[3])
        assert np.array_equal(a.tokens, b.tokens)

    def test_different_seed_differs(self, corpus):
        other = EncoderSpec(kind="frozen-random-vit", seed=8, patch_size=4, t_c=16, d_c=32)
        a = encode(VIT, corpus.images[3])
        b = encode(other, corpus.images[3])
        assert not np.allclose(a.tokens, b.tokens)

    def test_cls_is_token_mean(self, corpus):
        ct = encode(VIT, corpus.images[1])
        np.testing.assert_allclose(ct.cls, ct.tokens.mean(axis=0), atol=1e-6)

    def test_batch_matches_single(self, corpus):
        toks, cls = encode_batch(VIT, corpus.images[:4])
        single = encode(VIT, corpus.images[2])
        np.testing.assert_allclose(toks[2], single.tokens, atol=1e-5)

    def test_token_count_mismatch_rejected(self, corpus):
        bad = EncoderSpec(kind="frozen-random-vit", seed=7, patch_size=4, t_c=9, d_c=32)
        with pytest.raises(ValueError):
            encode(bad, corpus.images[0])


class TestOracleFactor:
    def test_requires_metadata(self, corpus):
        with pytest.raises(ValueError):
            encode(ORACLE, corpus.images[0])

    def test_same_episode_cls_similarity_exactly_one(self, corpus):
        ep = corpus.episodes[0]
        a = encode(ORACLE, corpus.images[ep.member_ids[0]], ep.factors(0))
        b = encode(ORACLE, corpus.images[ep.member_ids[1]], ep.factors(1))
        # nuisance dims are zeroed in cls, so shared class+hue implies equality
        assert np.array_equal(a.cls, b.cls)
        assert cosine_similarity(a.cls, b.cls) == 1.0

    def test_tokens_carry_nuisance(self, corpus):
        ep = corpus.episodes[0]
        a = encode(ORACLE, corpus.images[ep.member_ids[0]], ep.factors(0))
        b = encode(ORACLE, corpus.images[ep.member_ids[1]], ep.factors(1))
        assert not np.array_equal(a.tokens, b.tokens)

    def test_intra_vs_inter_episode_separation(self, corpus):
        intra, inter = [], []
        embs = {}
        for ep in corpus.episodes:
            for j, image_id in enumerate(ep.member_ids):
                embs[image_id] = encode(ORACLE, corpus.images[image_id], ep.factors(j)).cls
        for ep in corpus.episodes:
            ids = ep.member_ids
            intra.append(cosine_similarity(embs[ids[0]], embs[ids[1]]))
        eps_list = corpus.episodes
        for a, b in zip(eps_list, eps_list[1:]):
            inter.append(cosine_similarity(embs[a.member_ids[0]], embs[b.member_ids[0]]))
        assert np.mean(intra) > np.mean(inter) + 0.1

    def test_hue_changes_cls(self):
        a = encode(ORACLE, None, Factors(1, 0.1, (0, 0, 0.7, 0, 0)))
        b = encode(ORACLE, None, Factors(1, 0.6, (0, 0, 0.7, 0, 0)))
        assert not np.array_equal(a.cls, b.cls)


class TestEmbeddingFile:
    def test_empty_shard_gives_empty_valid_file(self, tmp_path):
        shard = tmp_path / "empty.epis"
        fileio.write_shard(shard, np.zeros((0, 16, 16, 3), dtype=np.float32), [])
        out = tmp_path / "empty.embd"
        assert precompute_embeddings(VIT, shard, out) == 0
        records, t_c, d_c = fileio.read_embeddings(out)
        assert records == [] and t_c == VIT.t_c and d_c == VIT.d_c

    def test_round_trip_bit_exact(self, tmp_path, corpus):
        shard = tmp_path / "c.epis"
        _write_corpus(shard, corpus)
        out = tmp_path / "c.embd"
        count = precompute_embeddings(VIT, shard, out)
        assert count == len(corpus.images)
        table = EmbeddingTable.from_file(out)
        for image_id in range(len(corpus.images)):
            direct = encode(VIT, corpus.images[image_id])
            stored = table.get(image_id)
            assert np.array_equal(stored.tokens, direct.tokens)
            assert np.array_equal(stored.cls, direct.cls)

    def test_rerun_byte_identical(self, tmp_path, corpus):
        shard = tmp_path / "c.epis"
        _write_corpus(shard, corpus)
        out1, out2 = tmp_path / "a.embd", tmp_path / "b.embd"
        precompute_embeddings(VIT, shard, out1)
        precompute_embeddings(VIT, shard, out2)
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_record_raises(self, tmp_path, corpus):
        shard = tmp_path / "c.epis"
        _write_corpus(shard, corpus)
        out = tmp_path / "c.embd"
        precompute_embeddings(VIT, shard, out)
        table = EmbeddingTable.from_file(out)
        with pytest.raises(KeyError):
            table.get(10_000)


def _write_corpus(path, corpus):
    fileio.write_shard(
        path,
        corpus.images,
        [
            {
                "episode_id": ep.episode_id,
                "class_id": ep.class_id,
                "hue": ep.hue,
                "member_ids": ep.member_ids,
                "nuisances": ep.nuisances,
            }
            for ep in corpus.episodes
        ],
    )


class TestEncoderSpec:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            EncoderSpec(kind="clip")

    def test_imported_needs_path(self):
        spec = EncoderSpec(kind="imported")
        with pytest.raises(ValueError):
            encode(spec, None, 3)
