"""Synthetic benchmark corpora.

Mixture-of-Zipf topic model: every topic owns a block of private tokens
with Zipf-distributed ranks, all topics share a common background block,
and each target topic's name is its rank-0 token with extra mass so the
name actually shows up in running text.  Out-of-category topics have
private blocks but no boosted name and their labels never collide with
target names.

The generator shares no code with the detection pipeline on purpose: it
knows nothing about embeddings or classifiers, so it can serve as an
independent benchmark for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import RawDoc
from .errors import ConfigError

_NATO = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot",
    "golf", "hotel", "india", "juliett", "kilo", "lima",
]


@dataclass
class GenConfig:
    n_target_topics: int = 4
    n_out_topics: int = 2
    n_docs: int = 2000
    p_out: float = 0.2
    mean_len: int = 80
    min_len: int = 20
    block_size: int = 300
    background_size: int = 1000
    background_weight: float = 0.3
    zipf_exponent: float = 1.1
    name_boost: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_target_topics < 2:
            raise ConfigError("need at least 2 target topics")
        if not (0.0 <= self.p_out < 1.0):
            raise ConfigError(f"p_out must be in [0, 1), got {self.p_out}")
        if self.n_docs < 10:
            raise ConfigError(f"n_docs must be at least 10, got {self.n_docs}")
        if self.p_out > 0.0 and self.n_out_topics < 1:
            raise ConfigError("p_out > 0 needs at least one out topic")
        if self.min_len < 1 or self.mean_len < self.min_len:
            raise ConfigError("need mean_len >= min_len >= 1")
        if self.block_size < 2:
            raise ConfigError("block_size must be at least 2")
        if self.background_size < 0 or not (0.0 <= self.background_weight < 1.0):
            raise ConfigError("bad background block settings")
        if self.background_size == 0 and self.background_weight > 0.0:
            raise ConfigError("background_weight > 0 with an empty background block")
        if self.zipf_exponent <= 0.0:
            raise ConfigError("zipf_exponent must be positive")
        if self.name_boost < 1.0:
            raise ConfigError("name_boost must be >= 1")


def _zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return ranks ** (-s)


def _target_name(k: int) -> str:
    return _NATO[k] if k < len(_NATO) else f"topic{k:02d}"


@dataclass
class TopicSpec:
    label: str
    surfaces: list[str]  # every token this topic can emit
    probs: np.ndarray  # mixture probabilities aligned with surfaces
    is_out: bool


def build_topics(cfg: GenConfig) -> list[TopicSpec]:
    """Materialize per-topic token distributions (target topics first)."""
    cfg.validate()
    background = [f"bg{j:04d}" for j in range(cfg.background_size)]
    bg_probs = _zipf_weights(cfg.background_size, cfg.zipf_exponent)
    if cfg.background_size:
        bg_probs = bg_probs / bg_probs.sum()

    topics = []
    for k in range(cfg.n_target_topics):
        name = _target_name(k)
        block = [name] + [f"{name}{j:03d}" for j in range(1, cfg.block_size)]
        w = _zipf_weights(cfg.block_size, cfg.zipf_exponent)
        w[0] *= cfg.name_boost
        w = w / w.sum()
        probs = np.concatenate([(1.0 - cfg.background_weight) * w,
                                cfg.background_weight * bg_probs])
        topics.append(TopicSpec(name, block + background, probs, is_out=False))
    for i in range(cfg.n_out_topics):
        label = f"out{i}"
        block = [f"{label}x{j:03d}" for j in range(cfg.block_size)]
        w = _zipf_weights(cfg.block_size, cfg.zipf_exponent)
        w = w / w.sum()
        probs = np.concatenate([(1.0 - cfg.background_weight) * w,
                                cfg.background_weight * bg_probs])
        topics.append(TopicSpec(label, block + background, probs, is_out=True))
    return topics


def generate(cfg: GenConfig) -> tuple[list[RawDoc], list[str]]:
    """Draw a labeled corpus; returns (documents, target category names).

    Same config (seed included) gives byte-identical documents.  The out
    fraction is rounded half-up to a document count; topic assignment is
    round-robin within each side, then slot order is shuffled once so
    labels interleave.
    """
    topics = build_topics(cfg)
    targets = [t for t in topics if not t.is_out]
    outs = [t for t in topics if t.is_out]

    n_out = int(np.floor(cfg.p_out * cfg.n_docs + 0.5))
    n_in = cfg.n_docs - n_out
    slots = [targets[i % len(targets)] for i in range(n_in)]
    slots += [outs[i % len(outs)] for i in range(n_out)]

    rng = np.random.default_rng(cfg.seed)
    rng.shuffle(slots)

    raws = []
    for idx, topic in enumerate(slots):
        length = cfg.min_len + int(rng.poisson(cfg.mean_len - cfg.min_len))
        picks = rng.choice(len(topic.surfaces), size=length, p=topic.probs)
        text = " ".join(topic.surfaces[j] for j in picks)
        raws.append(RawDoc(f"doc{idx:05d}", text, topic.label))
    return raws, [t.label for t in targets]
