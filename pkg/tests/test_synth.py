"""Synthetic corpus generator: determinism, counts, mixture fidelity."""

import collections

import numpy as np
import pytest

from oocd import detect, synth
from oocd.corpus import build_corpus, tokenize, write_corpus_jsonl
from oocd.errors import ConfigError


class TestGenConfig:
    def test_defaults_validate(self):
        synth.GenConfig().validate()

    def test_default_values(self):
        cfg = synth.GenConfig()
        assert (cfg.n_target_topics, cfg.n_out_topics) == (4, 2)
        assert (cfg.n_docs, cfg.p_out) == (2000, 0.2)
        assert (cfg.mean_len, cfg.min_len) == (80, 20)
        assert (cfg.block_size, cfg.background_size) == (300, 1000)
        assert cfg.background_weight == 0.3
        assert cfg.zipf_exponent == 1.1
        assert cfg.name_boost == 5.0

    @pytest.mark.parametrize("kwargs", [
        {"n_target_topics": 1},
        {"p_out": 1.0},
        {"p_out": -0.1},
        {"n_docs": 9},
        {"mean_len": 5, "min_len": 10},
        {"min_len": 0},
        {"background_weight": 1.0},
        {"background_size": 0},  # weight stays 0.3 -> inconsistent
        {"zipf_exponent": 0.0},
        {"name_boost": 0.5},
        {"p_out": 0.1, "n_out_topics": 0},
    ])
    def test_invalid_configs(self, kwargs):
        cfg = synth.GenConfig(**kwargs)
        with pytest.raises(ConfigError):
            cfg.validate()


class TestTopics:
    def test_blocks_disjoint_and_name_in_block(self):
        cfg = synth.GenConfig()
        topics = synth.build_topics(cfg)
        assert len(topics) == cfg.n_target_topics + cfg.n_out_topics
        seen = set()
        for t in topics:
            block = set(t.surfaces[:cfg.block_size])
            assert not (block & seen)
            seen |= block
            if not t.is_out:
                assert t.label in block
        background = set(topics[0].surfaces[cfg.block_size:])
        for t in topics[1:]:
            assert set(t.surfaces[cfg.block_size:]) == background

    def test_vocabulary_upper_bound(self):
        # 6 topic blocks of 300 plus 1000 shared background surfaces
        cfg = synth.GenConfig()
        surfaces = set()
        for t in synth.build_topics(cfg):
            surfaces |= set(t.surfaces)
        assert len(surfaces) <= 6 * 300 + 1000

    def test_probs_mixture_arithmetic(self):
        cfg = synth.GenConfig(n_target_topics=2, n_out_topics=1, block_size=4,
                              background_size=3, background_weight=0.25,
                              zipf_exponent=1.0, name_boost=2.0, n_docs=10)
        t = synth.build_topics(cfg)[0]
        # block zipf at s=1: (1, 1/2, 1/3, 1/4); name (rank 0) doubled
        block = np.array([2.0, 1 / 2, 1 / 3, 1 / 4])
        block /= block.sum()
        bg = np.array([1.0, 1 / 2, 1 / 3])
        bg /= bg.sum()
        expect = np.concatenate([0.75 * block, 0.25 * bg])
        assert np.allclose(t.probs, expect, atol=1e-12)
        assert t.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_out_topics_have_no_boost_or_name(self):
        topics = synth.build_topics(synth.GenConfig())
        for t in topics:
            if t.is_out:
                assert t.label.startswith("out")


class TestGenerate:
    def test_exact_out_count(self):
        cfg = synth.GenConfig(n_docs=1000, p_out=0.1, seed=3)
        raws, names = synth.generate(cfg)
        n_out = sum(1 for r in raws if r.gold_label not in names)
        assert n_out == 100

    def test_out_count_rounds_half_up(self):
        cfg = synth.GenConfig(n_docs=10, p_out=0.25, seed=0)
        raws, names = synth.generate(cfg)
        assert sum(1 for r in raws if r.gold_label not in names) == 3

    def test_deterministic(self, tmp_path):
        cfg = synth.GenConfig(n_docs=60, seed=9)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_corpus_jsonl(synth.generate(cfg)[0], str(a))
        write_corpus_jsonl(synth.generate(cfg)[0], str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_ids_and_lengths(self):
        cfg = synth.GenConfig(n_docs=50, min_len=15, mean_len=30, seed=2)
        raws, names = synth.generate(cfg)
        assert [r.doc_id for r in raws] == [f"doc{i:05d}" for i in range(50)]
        assert len(names) == cfg.n_target_topics
        for r in raws:
            assert len(r.text.split()) >= cfg.min_len
            assert r.gold_label is not None

    def test_every_label_is_a_topic(self):
        cfg = synth.GenConfig(n_docs=200, seed=4)
        raws, names = synth.generate(cfg)
        allowed = set(names) | {f"out{i}" for i in range(cfg.n_out_topics)}
        assert {r.gold_label for r in raws} <= allowed

    def test_in_topics_balanced(self):
        cfg = synth.GenConfig(n_docs=400, p_out=0.2, seed=6)
        raws, names = synth.generate(cfg)
        counts = collections.Counter(r.gold_label for r in raws if r.gold_label in names)
        # 320 in-category docs over 4 topics, round-robin
        assert set(counts.values()) == {80}


class TestMixtureFidelity:
    def test_sampler_total_variation(self):
        # The topic token distribution has ~1300 support points; at 1e5
        # draws the sampling noise alone sits near TV 0.024, so the 0.02
        # bound is checked where it is statistically meaningful, at 1e6.
        cfg = synth.GenConfig()
        topic = synth.build_topics(cfg)[1]
        rng = np.random.default_rng(77)
        n = 1_000_000
        draws = rng.choice(len(topic.probs), size=n, p=topic.probs)
        emp = np.bincount(draws, minlength=len(topic.probs)) / n
        tv = 0.5 * np.abs(emp - topic.probs).sum()
        assert tv < 0.02

    def test_document_tokens_follow_mixture(self):
        # Token counts harvested from whole generated documents; ~1e5
        # tokens per topic, so the bound carries the noise floor on top
        # of the spec tolerance.
        cfg = synth.GenConfig(n_target_topics=2, n_out_topics=1, n_docs=3000,
                              p_out=0.1, mean_len=80, min_len=20, seed=13)
        raws, names = synth.generate(cfg)
        topics = {t.label: t for t in synth.build_topics(cfg)}
        target = names[0]
        spec_t = topics[target]
        index = {s: i for i, s in enumerate(spec_t.surfaces)}
        counts = np.zeros(len(spec_t.surfaces))
        total = 0
        for r in raws:
            if r.gold_label != target:
                continue
            for tok in r.text.split():
                counts[index[tok]] += 1
                total += 1
        assert total > 100_000
        tv = 0.5 * np.abs(counts / total - spec_t.probs).sum()
        assert tv < 0.035

    def test_name_token_frequency_concentrated(self):
        raws, names = synth.generate(synth.GenConfig(seed=1))
        for name in names:
            own_hits = own_total = other_hits = other_total = 0
            for r in raws:
                toks = r.text.split()
                hits = sum(1 for t in toks if t == name)
                if r.gold_label == name:
                    own_hits += hits
                    own_total += len(toks)
                else:
                    other_hits += hits
                    other_total += len(toks)
            assert own_hits / own_total > other_hits / max(other_total, 1)


class TestDetectionOracle:
    def test_tf_centroid_separates_in_from_out(self):
        # Independent of the embedding model: cosine between raw tf
        # vectors and gold in-category centroids must already expose the
        # out-of-category documents on generator defaults.
        raws, names = synth.generate(synth.GenConfig(seed=21))
        corp = build_corpus(raws, min_freq=1)
        V = len(corp.vocab)
        tf = np.zeros((corp.n_docs, V))
        for i, doc in enumerate(corp.documents):
            np.add.at(tf[i], doc.tokens, 1.0)
        tf /= np.maximum(np.linalg.norm(tf, axis=1, keepdims=True), 1e-12)
        gold = [r.gold_label for r in raws]
        centroids = []
        for name in names:
            member = tf[[g == name for g in gold]].mean(axis=0)
            centroids.append(member / np.linalg.norm(member))
        sims = tf @ np.array(centroids).T
        conf = sims.max(axis=1)
        is_out = np.array([g not in names for g in gold])
        assert detect.auroc(conf, is_out) > 0.95
