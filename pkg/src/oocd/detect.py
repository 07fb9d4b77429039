"""Confidence rankings, evaluation metrics, and baseline detectors.

Orientation, fixed in one place: out-of-category is the positive class
and is detected by LOW confidence.  All tie handling is by ascending
document id so every number here is reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .classifier import ClfTrainConfig, CnnArch, conf_clf, init_params, pretrain
from .corpus import Corpus, ScenarioSpec
from .embed import EmbeddingSpace
from .errors import CategoryUncovered, ConfigError, DataError, UndefinedMetric

METHOD_TAGS = ("oocd_d", "oocd_w", "vmf_d", "vmf_w", "ancs", "lof", "smclass")


@dataclass
class ScoredCorpus:
    doc_keys: list[str]
    confidence: np.ndarray  # higher = more in-category
    method: str

    def __post_init__(self):
        if self.method not in METHOD_TAGS:
            raise ConfigError(f"unknown method tag {self.method!r}")
        if len(self.doc_keys) != len(self.confidence):
            raise DataError("one confidence per document required")
        if not np.all(np.isfinite(self.confidence)):
            raise DataError("confidences must be finite")


@dataclass
class GroundTruth:
    is_out: np.ndarray  # bool, True = out-of-category (positive)
    p_out: float


@dataclass
class EvalReport:
    method: str
    auroc: float
    aupr: float
    f1_at_o: float
    gamma: float
    o: int
    n: int
    p_out: float

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "auroc": self.auroc,
            "aupr": self.aupr,
            "f1_at_o": self.f1_at_o,
            "gamma": self.gamma,
            "o": self.o,
            "n": self.n,
            "p_out": self.p_out,
        }


def ground_truth(corpus: Corpus, scenario: ScenarioSpec) -> GroundTruth:
    """Out-of-category flags: gold label not among the target names."""
    targets = set(scenario.names)
    flags = []
    for doc in corpus.documents:
        if doc.gold_label is None:
            raise DataError(f"document {doc.doc_id!r} has no gold label; cannot evaluate")
        flags.append(doc.gold_label not in targets)
    is_out = np.asarray(flags, dtype=bool)
    return GroundTruth(is_out, float(is_out.mean()))


def _check_two_classes(is_out: np.ndarray) -> None:
    n_out = int(is_out.sum())
    if n_out == 0 or n_out == len(is_out):
        raise UndefinedMetric(
            f"need both classes present, got {n_out} out of {len(is_out)} positive"
        )


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(confidence: np.ndarray, is_out: np.ndarray) -> float:
    """P(random out-doc ranks strictly below a random in-doc), ties as 1/2."""
    _check_two_classes(is_out)
    ranks = _midranks(np.asarray(confidence, dtype=np.float64))
    n_in = int((~is_out).sum())
    n_out = int(is_out.sum())
    u_in = ranks[~is_out].sum() - n_in * (n_in + 1) / 2.0
    return float(u_in / (n_in * n_out))


def aupr(confidence: np.ndarray, is_out: np.ndarray) -> float:
    """Average precision sweeping ascending confidence, ties as one block."""
    _check_two_classes(is_out)
    conf = np.asarray(confidence, dtype=np.float64)
    order = np.argsort(conf, kind="mergesort")
    sorted_conf = conf[order]
    sorted_out = is_out[order]
    total_pos = int(is_out.sum())
    ap = 0.0
    cum_n = 0
    cum_tp = 0
    i = 0
    while i < len(conf):
        j = i
        while j + 1 < len(conf) and sorted_conf[j + 1] == sorted_conf[i]:
            j += 1
        tp_block = int(sorted_out[i:j + 1].sum())
        cum_n += j - i + 1
        cum_tp += tp_block
        if tp_block:
            ap += tp_block * (cum_tp / cum_n)
        i = j + 1
    return float(ap / total_pos)


def _key_rank(doc_keys: list[str]) -> np.ndarray:
    rank = np.empty(len(doc_keys), dtype=np.int64)
    rank[np.argsort(np.asarray(doc_keys, dtype=object), kind="stable")] = np.arange(len(doc_keys))
    return rank


def f1_at_o(confidence: np.ndarray, is_out: np.ndarray,
            doc_keys: list[str]) -> tuple[float, float, int]:
    """F1 predicting positive for the O least confident documents.

    O is the true out-of-category count, so precision = recall and F1 is
    the hit fraction.  Returns (f1, gamma, o) with gamma the O-th
    smallest confidence under the (confidence, id) tie order.
    """
    _check_two_classes(is_out)
    conf = np.asarray(confidence, dtype=np.float64)
    o = int(is_out.sum())
    order = np.lexsort((_key_rank(doc_keys), conf))
    picked = order[:o]
    f1 = float(is_out[picked].sum() / o)
    gamma = float(conf[order[o - 1]])
    return f1, gamma, o


def evaluate(scored: ScoredCorpus, truth: GroundTruth) -> EvalReport:
    if len(truth.is_out) != len(scored.confidence):
        raise DataError("scored corpus and ground truth differ in length")
    f1, gamma, o = f1_at_o(scored.confidence, truth.is_out, scored.doc_keys)
    return EvalReport(
        method=scored.method,
        auroc=auroc(scored.confidence, truth.is_out),
        aupr=aupr(scored.confidence, truth.is_out),
        f1_at_o=f1,
        gamma=gamma,
        o=o,
        n=len(scored.confidence),
        p_out=truth.p_out,
    )


# --- baselines -------------------------------------------------------------


def baseline_ancs(space: EmbeddingSpace) -> ScoredCorpus:
    """Average cosine to all other documents, via the mean-vector identity.

    sum_{d' != d} cos(d, d') = d . (S - d) with S the vector sum; the
    outlier score is the negated average, confidence negates it again.
    """
    docs = space.docs
    N = docs.shape[0]
    if N < 2:
        raise UndefinedMetric("ANCS needs at least 2 documents")
    sums = docs @ docs.sum(axis=0) - 1.0  # cos(d, d) = 1 on the sphere
    confidence = sums / (N - 1)
    return ScoredCorpus(space.doc_keys, confidence, "ancs")


def baseline_lof(space: EmbeddingSpace, k: int = 20) -> ScoredCorpus:
    """Local outlier factor on 1 - cos distance; confidence = -LOF."""
    if k < 1:
        raise ConfigError(f"LOF needs k >= 1, got {k}")
    docs = space.docs
    N = docs.shape[0]
    if N <= k:
        raise UndefinedMetric(f"LOF with k={k} needs more than k documents, got {N}")
    dist = 1.0 - docs @ docs.T
    np.fill_diagonal(dist, np.inf)
    dist = np.maximum(dist, 1e-12)  # duplicates would zero the density

    rank = np.broadcast_to(_key_rank(space.doc_keys), dist.shape)
    order = np.lexsort((rank, dist), axis=-1)
    nn = order[:, :k]
    rows = np.arange(N)[:, None]
    kdist = dist[np.arange(N), nn[:, -1]]  # distance to each point's k-th neighbor
    reach = np.maximum(kdist[nn], dist[rows, nn])
    lrd = 1.0 / reach.mean(axis=1)
    lof = lrd[nn].mean(axis=1) / lrd
    return ScoredCorpus(space.doc_keys, -lof, "lof")


def match_category_names(corpus: Corpus, scenario: ScenarioSpec
                         ) -> tuple[list[int], np.ndarray]:
    """Docs mentioning exactly one distinct category-name token.

    Returns (document positions, hard label indices).  Documents that
    mention several different names are ambiguous and dropped.
    """
    name_ids = {tid: k for k, tid in enumerate(scenario.token_ids)}
    positions, labels = [], []
    for i, doc in enumerate(corpus.documents):
        present = {name_ids[t] for t in set(doc.tokens.tolist()) if t in name_ids}
        if len(present) == 1:
            positions.append(i)
            labels.append(present.pop())
    counts = np.bincount(labels, minlength=scenario.n_categories) if labels else \
        np.zeros(scenario.n_categories, dtype=np.int64)
    for k, name in enumerate(scenario.names):
        if counts[k] == 0:
            raise CategoryUncovered(name)
    return positions, np.asarray(labels, dtype=np.int64)


def baseline_smclass(corpus: Corpus, scenario: ScenarioSpec, space: EmbeddingSpace,
                     arch: CnnArch, cfg: ClfTrainConfig, seed: int) -> ScoredCorpus:
    """Name-matching supervision: one-hot CNN training, msp confidence.

    Same architecture and optimizer as the main classifier; no pseudo
    labels, no filtering, no self-training.
    """
    positions, labels = match_category_names(corpus, scenario)
    targets = np.zeros((len(positions), scenario.n_categories))
    targets[np.arange(len(positions)), labels] = 1.0
    params = init_params(arch, space.words_center, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C1A55]))
    pretrain(params, [corpus.documents[i].tokens for i in positions], targets, cfg, rng)
    conf, _ = conf_clf(params, [d.tokens for d in corpus.documents], "msp")
    return ScoredCorpus(corpus.doc_ids, conf, "smclass")


# --- on-disk formats -------------------------------------------------------


def write_scores(scored: ScoredCorpus, truth: GroundTruth | None,
                 gold_labels: list[str | None] | None, path: str) -> None:
    """Ranking CSV; rank 1 is the most confident (ties by ascending id)."""
    conf = scored.confidence
    order = np.lexsort((_key_rank(scored.doc_keys), -conf))
    rank = np.empty(len(conf), dtype=np.int64)
    rank[order] = np.arange(1, len(conf) + 1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["doc_id", "confidence", "rank"]
        if truth is not None:
            header += ["is_out", "gold_label"]
        writer.writerow(header)
        for i, key in enumerate(scored.doc_keys):
            row = [key, repr(float(conf[i])), int(rank[i])]
            if truth is not None:
                row += [int(truth.is_out[i]),
                        "" if gold_labels is None or gold_labels[i] is None else gold_labels[i]]
            writer.writerow(row)


def read_scores(path: str) -> tuple[list[str], np.ndarray, str]:
    """Read a ranking CSV back; returns (doc ids, confidence, method='')."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty scores file") from None
        if header[:3] != ["doc_id", "confidence", "rank"]:
            raise DataError(f"{path}: unexpected scores header {header}")
        keys, conf = [], []
        for rec in reader:
            if len(rec) < 3:
                raise DataError(f"{path}: short row {rec}")
            keys.append(rec[0])
            conf.append(float(rec[1]))
    if not keys:
        raise DataError(f"{path}: no score rows")
    return keys, np.asarray(conf, dtype=np.float64), ""


def write_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")


def read_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: not valid JSON: {e}") from e


def aggregate_reports(reports: list[dict]) -> dict:
    """Mean of each metric, grouped by method tag."""
    if not reports:
        raise DataError("nothing to aggregate")
    by_method: dict[str, list[dict]] = {}
    for rep in reports:
        by_method.setdefault(rep.get("method", "?"), []).append(rep)
    out: dict = {"n_reports": len(reports), "methods": {}}
    for method in sorted(by_method):
        group = by_method[method]
        agg = {"n_runs": len(group)}
        for field in ("auroc", "aupr", "f1_at_o", "gamma", "p_out"):
            vals = [r[field] for r in group if field in r]
            if vals:
                agg[field + "_mean"] = float(np.mean(vals))
        out["methods"][method] = agg
    return out
