"""Shared fixtures: tiny handmade corpora and one small trained space."""

import numpy as np
import pytest

from oocd import corpus as corpus_mod
from oocd import embed, synth
from oocd.corpus import RawDoc


def make_raws(texts, labels=None, prefix="doc"):
    if labels is None:
        labels = [None] * len(texts)
    return [RawDoc(f"{prefix}{i:02d}", text, label)
            for i, (text, label) in enumerate(zip(texts, labels))]


SMALL_GEN = synth.GenConfig(
    n_target_topics=3,
    n_out_topics=2,
    n_docs=240,
    p_out=0.2,
    mean_len=40,
    min_len=10,
    block_size=120,
    background_size=240,
    seed=5,
)

SMALL_EMBED = embed.EmbedConfig(dim=32, epochs=3, seed=5)


@pytest.fixture(scope="session")
def small_setup():
    """A small generated corpus with its trained embedding space."""
    raws, names = synth.generate(SMALL_GEN)
    corp = corpus_mod.build_corpus(raws, min_freq=2)
    scen = corpus_mod.resolve_category_names(corp, names)
    space, curve = embed.train(corp, scen, SMALL_EMBED)
    return corp, scen, space, curve


@pytest.fixture
def unit_rng():
    return np.random.default_rng(20240817)


def random_unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)
