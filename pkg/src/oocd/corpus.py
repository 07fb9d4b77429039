"""Corpus ingestion: tokenization, vocabulary, and category-name resolution.

Documents arrive as JSONL records with ``id``, ``text`` and an optional
gold ``label``.  Tokenization is deliberately blunt (lowercase, split on
non-alphanumeric runs, drop single characters and digit-only tokens);
anything smarter belongs upstream of this package.
"""

from __future__ import annotations

import json
import pickle
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DuplicateCategoryToken,
    EmptyCorpus,
    MultiTokenName,
    NameNotInVocabulary,
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# pickle protocol pinned so corpus.bin bytes do not depend on the
# interpreter version
_PICKLE_PROTOCOL = 4


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop short/numeric tokens."""
    return [
        t
        for t in _TOKEN_RE.findall(text.lower())
        if len(t) >= 2 and not t.isdigit()
    ]


@dataclass
class RawDoc:
    doc_id: str
    text: str
    gold_label: str | None = None


class Vocabulary:
    """Immutable token table.

    Token ids are assigned by descending corpus frequency, ties broken by
    lexicographic surface order, so the mapping is a pure function of the
    corpus and never depends on dict iteration order.
    """

    def __init__(self, surfaces: list[str], counts: np.ndarray):
        if len(surfaces) != len(counts):
            raise ValueError("surfaces and counts must align")
        self.surfaces = list(surfaces)
        self.counts = np.asarray(counts, dtype=np.int64)
        self._index = {s: i for i, s in enumerate(self.surfaces)}

    def __len__(self) -> int:
        return len(self.surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self._index

    def id_of(self, surface: str) -> int:
        return self._index[surface]

    def get(self, surface: str, default: int = -1) -> int:
        return self._index.get(surface, default)

    def surface_of(self, token_id: int) -> str:
        return self.surfaces[token_id]

    def decode(self, token_ids) -> list[str]:
        return [self.surfaces[int(i)] for i in token_ids]

    @property
    def total_tokens(self) -> int:
        return int(self.counts.sum())


@dataclass
class Document:
    doc_id: str
    tokens: np.ndarray  # int32 vocabulary ids, in text order
    gold_label: str | None = None

    @property
    def is_empty(self) -> bool:
        """True when nothing survived tokenization + vocab filtering.

        Empty documents stay in the corpus (they must still be scored and
        ranked) but are skipped by every training loop.
        """
        return len(self.tokens) == 0


@dataclass
class Corpus:
    documents: list[Document]
    vocab: Vocabulary

    @property
    def n_docs(self) -> int:
        return len(self.documents)

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]

    def trainable_indices(self) -> np.ndarray:
        """Indices of documents with at least one token."""
        return np.array(
            [i for i, d in enumerate(self.documents) if not d.is_empty],
            dtype=np.int64,
        )

    def gold_labels(self) -> list[str | None]:
        return [d.gold_label for d in self.documents]


@dataclass
class ScenarioSpec:
    """Resolved in-scope categories.

    ``names`` are the user-facing category names, ``token_ids`` the
    vocabulary ids their (single-token) surface forms map to.  Order is
    the order given at resolution time and defines category index k.
    """

    names: list[str]
    token_ids: list[int]

    @property
    def n_categories(self) -> int:
        return len(self.names)


def build_corpus(raws: list[RawDoc], min_freq: int = 5) -> Corpus:
    """Tokenize, build the frequency-filtered vocabulary, encode documents.

    Tokens with corpus frequency below ``min_freq`` are removed outright;
    documents keep their surviving tokens in text order.  A document may
    end up empty (kept, flagged).  A corpus where *every* document is
    empty is unusable and raises EmptyCorpus.
    """
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    if not raws:
        raise EmptyCorpus("no documents given")

    seen_ids: set[str] = set()
    for r in raws:
        if not r.doc_id or r.doc_id != r.doc_id.strip() or any(c.isspace() for c in r.doc_id):
            raise DataError(f"bad document id {r.doc_id!r}: empty or contains whitespace")
        if r.doc_id in seen_ids:
            raise DataError(f"duplicate document id {r.doc_id!r}")
        seen_ids.add(r.doc_id)

    tokenized = [tokenize(r.text) for r in raws]
    freq = Counter(t for toks in tokenized for t in toks)
    kept = sorted(
        ((s, c) for s, c in freq.items() if c >= min_freq),
        key=lambda sc: (-sc[1], sc[0]),
    )
    vocab = Vocabulary([s for s, _ in kept], np.array([c for _, c in kept], dtype=np.int64))

    docs = []
    any_tokens = False
    for r, toks in zip(raws, tokenized):
        ids = np.array(
            [vocab.id_of(t) for t in toks if t in vocab], dtype=np.int32
        )
        any_tokens = any_tokens or len(ids) > 0
        docs.append(Document(r.doc_id, ids, r.gold_label))
    if not any_tokens:
        raise EmptyCorpus(
            "all documents are empty after tokenization and frequency filtering"
        )
    return Corpus(docs, vocab)


def resolve_category_names(corpus: Corpus, names: list[str]) -> ScenarioSpec:
    """Map category names onto vocabulary ids.

    Each name must tokenize to exactly one in-vocabulary token, and no
    two names may collide on the same token.
    """
    if len(names) < 2:
        raise ConfigError(f"need at least 2 category names, got {len(names)}")
    if len(set(names)) != len(names):
        raise ConfigError("category names must be distinct")
    token_ids = []
    seen: dict[int, str] = {}
    for name in names:
        toks = tokenize(name)
        if len(toks) > 1:
            raise MultiTokenName(name, toks)
        if not toks or toks[0] not in corpus.vocab:
            raise NameNotInVocabulary(name)
        tid = corpus.vocab.id_of(toks[0])
        if tid in seen:
            raise DuplicateCategoryToken(toks[0])
        seen[tid] = name
        token_ids.append(tid)
    return ScenarioSpec(list(names), token_ids)


# --- on-disk formats -------------------------------------------------------


def read_corpus_jsonl(path: str) -> list[RawDoc]:
    raws = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: not valid JSON: {e}") from e
            if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
                raise DataError(f"{path}:{lineno}: need an object with 'id' and 'text'")
            doc_id, text = rec["id"], rec["text"]
            if not isinstance(doc_id, str) or not isinstance(text, str):
                raise DataError(f"{path}:{lineno}: 'id' and 'text' must be strings")
            label = rec.get("label")
            if label is not None and not isinstance(label, str):
                raise DataError(f"{path}:{lineno}: 'label' must be a string when present")
            raws.append(RawDoc(doc_id, text, label))
    if not raws:
        raise EmptyCorpus(f"{path} holds no documents")
    return raws


def write_corpus_jsonl(raws: list[RawDoc], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in raws:
            rec = {"id": r.doc_id, "text": r.text}
            if r.gold_label is not None:
                rec["label"] = r.gold_label
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_scenario_json(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            rec = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(rec, dict) or "targets" not in rec:
        raise DataError(f"{path}: need an object with a 'targets' list")
    targets = rec["targets"]
    if not isinstance(targets, list) or not all(isinstance(t, str) for t in targets):
        raise DataError(f"{path}: 'targets' must be a list of strings")
    return targets


def write_scenario_json(names: list[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"targets": list(names)}, sort_keys=True) + "\n")


def save_corpus(corpus: Corpus, scenario: ScenarioSpec, path: str) -> None:
    """Persist the encoded corpus plus resolved scenario as one artifact."""
    with open(path, "wb") as fh:
        pickle.dump((corpus, scenario), fh, protocol=_PICKLE_PROTOCOL)


def load_corpus(path: str) -> tuple[Corpus, ScenarioSpec]:
    with open(path, "rb") as fh:
        try:
            corpus, scenario = pickle.load(fh)
        except Exception as e:
            raise DataError(f"{path}: cannot unpickle corpus: {e}") from e
    if not isinstance(corpus, Corpus) or not isinstance(scenario, ScenarioSpec):
        raise DataError(f"{path}: does not hold a (Corpus, ScenarioSpec) pair")
    return corpus, scenario
