"""Relevance scores, temperature pseudo-labels, and confidence filtering.

Two relevance variants over a trained space:

* direct: r_d(d, c) = kappa * cos(d, c), the log of the spherical
  density kernel around the category vector (the shared normalizer is an
  additive constant and is dropped),
* proximity: r_w(d, c) sums cos(d, d') * cos(d', w) * exp(kappa *
  cos(w, c)) over d's k nearest documents d' and each d''s j nearest
  words w, with all cosine factors kept raw (possibly negative).

Pseudo-labels are the row-wise softmax of r / T; the embedding
confidence of a document is its row maximum.  Filtering keeps either the
documents above a fixed threshold or the top ceil(ratio * N) by
confidence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .embed import EmbeddingSpace
from .errors import ConfigError, DataError, EmptyConfidentSet

# softmax outputs are clipped up to this floor (then renormalized) so
# every probability is strictly inside (0, 1) even when exp underflows
_PROB_FLOOR = 1e-12

# exp(x) overflows float64 near x = 709; shift exponents only when the
# literal evaluation would actually be at risk
_EXP_GUARD = 500.0


@dataclass
class RelevanceMatrix:
    doc_keys: list[str]
    cat_keys: list[str]
    values: np.ndarray  # (N, K) float64
    variant: str  # "direct" | "proximity"


@dataclass
class PseudoLabelSet:
    doc_keys: list[str]
    labels: np.ndarray  # (N, K) rows sum to 1
    conf: np.ndarray  # (N,) row maxima
    temperature: float

    @property
    def n_categories(self) -> int:
        return self.labels.shape[1]


@dataclass
class ConfidentSet:
    """Documents that survived confidence filtering.

    ``indices`` are positions into the pseudo-label set's document
    order, ascending.  ``threshold`` is the realized tau: the value
    given in threshold mode, or in ratio mode the largest value that
    still admits every kept document under a strict ``conf > tau`` rule.
    """

    indices: np.ndarray  # int64, ascending
    labels: np.ndarray  # (n_kept, K)
    threshold: float
    mode: str  # "ratio" | "threshold"

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class NeighborIndex:
    doc_neighbors: np.ndarray  # (N, k_eff) document positions
    word_neighbors: np.ndarray  # (N, j_eff) token ids, per document
    k: int
    j: int


def _id_rank(keys: list[str]) -> np.ndarray:
    """Rank of each key under ascending lexicographic order."""
    rank = np.empty(len(keys), dtype=np.int64)
    rank[np.argsort(np.asarray(keys, dtype=object), kind="stable")] = np.arange(len(keys))
    return rank


def build_neighbor_index(space: EmbeddingSpace, k: int = 30, j: int = 30) -> NeighborIndex:
    """Exact brute-force cosine neighbors: doc->doc and doc->word.

    Self is excluded from document neighbors; ties break by ascending
    id (lexicographic for documents, vocabulary order for words).  k and
    j shrink automatically when the corpus has fewer candidates.
    """
    if k < 1 or j < 1:
        raise ConfigError(f"neighbor counts must be >= 1, got k={k}, j={j}")
    N = space.docs.shape[0]
    M = space.words_center.shape[0]
    k_eff = min(k, max(N - 1, 0))
    j_eff = min(j, M)

    sims = space.docs @ space.docs.T
    np.fill_diagonal(sims, -2.0)  # below any cosine, so self never ranks
    rank = np.broadcast_to(_id_rank(space.doc_keys), sims.shape)
    order = np.lexsort((rank, -sims), axis=-1)
    doc_neighbors = order[:, :k_eff].astype(np.int64)

    dw = space.docs @ space.words_center.T
    word_neighbors = np.argsort(-dw, axis=1, kind="stable")[:, :j_eff].astype(np.int64)
    return NeighborIndex(doc_neighbors, word_neighbors, k, j)


def relevance_direct(space: EmbeddingSpace) -> RelevanceMatrix:
    """r_d(d, c) = kappa * cos(d, c)."""
    values = space.kappa * (space.docs @ space.cats.T)
    return RelevanceMatrix(space.doc_keys, space.cat_keys, values, "direct")


def relevance_proximity(space: EmbeddingSpace, index: NeighborIndex) -> RelevanceMatrix:
    """r_w(d, c) over the (neighbor doc, neighbor word) pairs of d.

    The word factor exp(kappa * cos(w, c)) is evaluated literally; a
    shared max is subtracted inside the exp only when the largest
    exponent would risk overflow, which rescales every row by the same
    positive constant (softmax argmaxes are unaffected; tempered values
    shift, which is the documented price of extreme kappa).
    """
    docs, cats = space.docs, space.cats
    sims = docs @ docs.T
    dw = docs @ space.words_center.T

    expo = space.kappa * (space.words_center @ cats.T)  # (M, K)
    shift = max(float(expo.max(initial=0.0)) - _EXP_GUARD, 0.0)
    word_term = np.exp(expo - shift)

    nbr = index.doc_neighbors  # (N, k)
    wnb = index.word_neighbors  # (N, j)
    # per neighbor document d': sum_w cos(d', w) * exp-term(w, c)
    wcos = np.take_along_axis(dw, wnb, axis=1)  # (N, j)
    per_doc = np.einsum("nj,njc->nc", wcos, word_term[wnb])  # (N, K)
    dcos = np.take_along_axis(sims, nbr, axis=1)  # (N, k)
    values = np.einsum("nk,nkc->nc", dcos, per_doc[nbr])
    if not np.all(np.isfinite(values)):
        raise DataError("proximity relevance produced non-finite values")
    return RelevanceMatrix(space.doc_keys, space.cat_keys, values, "proximity")


def pseudo_labels(relevance: RelevanceMatrix, temperature: float = 0.1) -> PseudoLabelSet:
    """Row-wise softmax of r / T with max-subtraction.

    A 1e-12 probability floor (with renormalization) keeps every entry
    strictly inside (0, 1); anything that small carries no ranking
    information anyway.
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = relevance.values / temperature
    z = z - z.max(axis=1, keepdims=True)
    labels = np.exp(z)
    labels = np.maximum(labels, _PROB_FLOOR)
    labels /= labels.sum(axis=1, keepdims=True)
    return PseudoLabelSet(relevance.doc_keys, labels, labels.max(axis=1), temperature)


def filter_confident(labels: PseudoLabelSet, tau: float | None = None,
                     keep_ratio: float | None = None) -> ConfidentSet:
    """Keep documents by confidence: strict threshold or top ratio.

    Exactly one of ``tau`` and ``keep_ratio`` must be given.  Ratio mode
    keeps the ceil(ratio * N) most confident documents, ties broken by
    ascending document id, and reports the implied threshold as the
    boundary value just under the smallest kept confidence.
    """
    if (tau is None) == (keep_ratio is None):
        raise ConfigError("give exactly one of tau and keep_ratio")
    conf = labels.conf
    N = len(conf)
    if keep_ratio is not None:
        if not (0.0 < keep_ratio <= 1.0):
            raise ConfigError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
        n_keep = math.ceil(keep_ratio * N)
        if n_keep < 1:
            raise EmptyConfidentSet(f"keep_ratio {keep_ratio} keeps no documents")
        order = np.lexsort((_id_rank(labels.doc_keys), -conf))
        kept = np.sort(order[:n_keep])
        threshold = float(np.nextafter(conf[kept].min(), -np.inf))
        mode = "ratio"
    else:
        kept = np.flatnonzero(conf > tau)
        threshold = float(tau)
        mode = "threshold"
    return ConfidentSet(kept.astype(np.int64), labels.labels[kept].copy(), threshold, mode)


# --- on-disk format --------------------------------------------------------


def save_pseudo(labels: PseudoLabelSet, confident: ConfidentSet | None, path: str) -> None:
    """CSV dump: doc_id, conf_emb, one column per category, kept flag."""
    K = labels.n_categories
    kept = np.zeros(len(labels.doc_keys), dtype=bool)
    if confident is not None:
        kept[confident.indices] = True
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["doc_id", "conf_emb"] + [f"y_{c + 1}" for c in range(K)] + ["kept"])
        for i, doc_id in enumerate(labels.doc_keys):
            writer.writerow([doc_id, repr(float(labels.conf[i]))]
                            + [repr(float(x)) for x in labels.labels[i]]
                            + [int(kept[i])])


def load_pseudo(path: str, temperature: float) -> tuple[PseudoLabelSet, np.ndarray]:
    """Read a pseudo-label CSV back; returns (labels, kept mask)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty pseudo-label file") from None
        if len(header) < 4 or header[:2] != ["doc_id", "conf_emb"] or header[-1] != "kept":
            raise DataError(f"{path}: unexpected pseudo-label header {header}")
        K = len(header) - 3
        doc_keys, rows, kept = [], [], []
        for rec in reader:
            if len(rec) != K + 3:
                raise DataError(f"{path}: row has {len(rec)} fields, expected {K + 3}")
            doc_keys.append(rec[0])
            rows.append([float(x) for x in rec[2:2 + K]])
            kept.append(bool(int(rec[-1])))
    labels = np.asarray(rows, dtype=np.float64)
    if labels.size == 0:
        raise DataError(f"{path}: no pseudo-label rows")
    return (
        PseudoLabelSet(doc_keys, labels, labels.max(axis=1), temperature),
        np.asarray(kept, dtype=bool),
    )
