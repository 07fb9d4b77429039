"""Discriminative spherical text embedding.

Words get two unit vectors (center u_w, context v_w); every document and
every in-scope category gets one unit vector.  All of them live on the
same sphere and share one fixed concentration kappa, so the von
Mises-Fisher normalizer is a common constant and drops out of every
objective below.

Training minimizes three terms:

* a positive hinge per (center word, context word) pair in a sliding
  window, contrasted against freshly drawn negatives for both the
  context-word slot and the document slot,
* a name-attraction term pulling each category vector and its name's
  center vector together while their dot product is under the margin,
* a separation hinge pushing category vectors apart once their dot
  product exceeds the margin.

Updates are plain SGD steps followed by projection back to the unit
sphere.  The positive-pair sweep is compiled with numba; category terms
run once per epoch in numpy.  With ``workers > 1`` the sweep runs
lock-free across threads (updates may race benignly; a final projection
pass restores unit norms), with ``workers == 1`` training is
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .corpus import Corpus, ScenarioSpec
from .errors import ConfigError, DataError

# --- configuration ---------------------------------------------------------


@dataclass
class EmbedConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    margin: float = 0.25
    lr: float = 0.025
    lr_floor: float = 1e-4
    epochs: int = 10
    kappa: float = 10.0
    sample_power: float = 0.75
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.negatives < 1:
            raise ConfigError(f"negatives must be >= 1, got {self.negatives}")
        if self.margin <= 0.0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.lr <= 0.0 or self.lr_floor <= 0.0 or self.lr_floor > self.lr:
            raise ConfigError(f"need lr >= lr_floor > 0, got {self.lr}, {self.lr_floor}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.kappa <= 0.0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if not (0.0 < self.sample_power <= 1.0):
            raise ConfigError(f"sample_power must be in (0, 1], got {self.sample_power}")


@dataclass
class EmbeddingSpace:
    """All trained vectors plus the keys they belong to.

    ``words_context`` exists only in freshly trained spaces; it is not
    persisted because nothing downstream reads it.
    """

    word_keys: list[str]
    doc_keys: list[str]
    cat_keys: list[str]
    words_center: np.ndarray  # (M, P) float64
    words_context: np.ndarray | None
    docs: np.ndarray  # (N, P)
    cats: np.ndarray  # (K, P)
    kappa: float

    @property
    def dim(self) -> int:
        return self.words_center.shape[1]

    def unit_norm_error(self) -> float:
        """Largest deviation of any stored vector norm from 1."""
        worst = 0.0
        mats = [self.words_center, self.docs, self.cats]
        if self.words_context is not None:
            mats.append(self.words_context)
        for m in mats:
            if m.shape[0]:
                worst = max(worst, float(np.abs(np.linalg.norm(m, axis=1) - 1.0).max()))
        return worst


# --- loss terms (pure, unprojected; used by tests and kept in sync with
# the compiled sweep) -------------------------------------------------------


def hinge_loss(u_center, v_context, v_neg, doc, u_neg, margin: float) -> float:
    """max(0, v_neg.u - v_ctx.u + u_neg.d - u.d + margin)."""
    z = (
        float(v_neg @ u_center)
        - float(v_context @ u_center)
        + float(u_neg @ doc)
        - float(u_center @ doc)
        + margin
    )
    return max(z, 0.0)


def hinge_grads(u_center, v_context, v_neg, doc, u_neg, margin: float):
    loss = hinge_loss(u_center, v_context, v_neg, doc, u_neg, margin)
    if loss <= 0.0:
        zeros = np.zeros_like(u_center)
        return loss, {k: zeros.copy() for k in
                      ("u_center", "v_context", "v_neg", "doc", "u_neg")}
    return loss, {
        "u_center": v_neg - v_context - doc,
        "v_context": -u_center,
        "v_neg": u_center.copy(),
        "doc": u_neg - u_center,
        "u_neg": doc.copy(),
    }


def name_loss(u_name, cat, kappa: float, margin: float) -> float:
    """-kappa * u_name.c while u_name.c < margin, else 0."""
    dot = float(u_name @ cat)
    return -kappa * dot if dot < margin else 0.0


def name_grads(u_name, cat, kappa: float, margin: float):
    dot = float(u_name @ cat)
    if dot < margin:
        return -kappa * dot, {"u_name": -kappa * cat, "cat": -kappa * u_name}
    zeros = np.zeros_like(u_name)
    return 0.0, {"u_name": zeros, "cat": zeros.copy()}


def separation_loss(cat_i, cat_j, margin: float) -> float:
    """max(0, c_j.c_i - margin)."""
    return max(float(cat_j @ cat_i) - margin, 0.0)


def separation_grads(cat_i, cat_j, margin: float):
    loss = separation_loss(cat_i, cat_j, margin)
    if loss <= 0.0:
        zeros = np.zeros_like(cat_i)
        return loss, {"cat_i": zeros, "cat_j": zeros.copy()}
    return loss, {"cat_i": cat_j.copy(), "cat_j": cat_i.copy()}


# --- negative sampling -----------------------------------------------------


class NegativeSampler:
    """Unigram distribution raised to ``power``, drawn via an inverse CDF."""

    def __init__(self, counts: np.ndarray, power: float = 0.75):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.size == 0 or counts.sum() <= 0:
            raise DataError("cannot build a negative sampler from an empty vocabulary")
        w = counts ** power
        self.probabilities = w / w.sum()
        self.cdf = np.cumsum(self.probabilities)
        self.cdf[-1] = 1.0  # guard against cumulative rounding

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        x = rng.random(size)
        return np.minimum(
            np.searchsorted(self.cdf, x, side="right"), len(self.cdf) - 1
        )


# --- compiled inner loop ---------------------------------------------------
# A tiny splitmix64 generator keeps negative sampling independent of the
# vector contents, which the rotation-equivariance guarantee needs.


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _next_f64(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = _mix64(state[0])
    return (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def _sample_cdf(cdf, state):
    x = _next_f64(state)
    lo = 0
    hi = cdf.shape[0]
    while lo < hi:  # first index with cdf[idx] > x
        mid = (lo + hi) // 2
        if cdf[mid] > x:
            hi = mid
        else:
            lo = mid + 1
    if lo >= cdf.shape[0]:
        lo = cdf.shape[0] - 1
    return lo


@njit(cache=True, inline="always")
def _renorm_row(mat, row):
    s = 0.0
    for p in range(mat.shape[1]):
        s += mat[row, p] * mat[row, p]
    s = math.sqrt(s)
    if s > 0.0:
        inv = 1.0 / s
        for p in range(mat.shape[1]):
            mat[row, p] *= inv


@njit(cache=True, inline="always")
def _category_step(u, cats, name_ids, kappa, margin, lr, tmp_a, tmp_b):
    """One indicator-gated step of name attraction + pairwise separation.

    The indicators make repeated application self-limiting: each term
    goes quiet as soon as its margin condition holds, so category
    vectors end up tracking their name's center vector inside the margin
    cone instead of keeping their random initialization.
    """
    K = cats.shape[0]
    P = cats.shape[1]
    for k in range(K):
        wid = name_ids[k]
        dot = 0.0
        for p in range(P):
            dot += u[wid, p] * cats[k, p]
        if dot < margin:
            for p in range(P):
                tmp_a[p] = u[wid, p]
                tmp_b[p] = cats[k, p]
            for p in range(P):
                u[wid, p] += lr * kappa * tmp_b[p]
                cats[k, p] += lr * kappa * tmp_a[p]
            _renorm_row(u, wid)
            _renorm_row(cats, k)
    for i in range(K):
        for j in range(i + 1, K):
            dot = 0.0
            for p in range(P):
                dot += cats[j, p] * cats[i, p]
            if dot > margin:
                for p in range(P):
                    tmp_a[p] = cats[i, p]
                    tmp_b[p] = cats[j, p]
                for p in range(P):
                    cats[i, p] -= lr * tmp_b[p]
                    cats[j, p] -= lr * tmp_a[p]
                _renorm_row(cats, i)
                _renorm_row(cats, j)


@njit(cache=True, nogil=True)
def _sweep(tokens_flat, offsets, order, u, v, d, cats, name_ids, kappa,
           cdf, window, negatives, margin, lr0, lr_floor, total_pairs,
           pair_base, state, stats):
    """One pass of positive-pair SGD over ``order``'s documents.

    ``pair_base`` is the global pair counter at entry; the learning rate
    decays linearly in that counter down to ``lr_floor``.  ``stats``
    accumulates (sum of active hinge losses, number of active hinges).
    The category terms fire once per processed document.
    """
    P = u.shape[1]
    tu = np.empty(P)
    tvk = np.empty(P)
    tvn = np.empty(P)
    td = np.empty(P)
    tun = np.empty(P)
    t = pair_base
    for oi in range(order.shape[0]):
        di = order[oi]
        start = offsets[di]
        L = offsets[di + 1] - start
        lr = lr0 * (1.0 - t / total_pairs)
        if lr < lr_floor:
            lr = lr_floor
        _category_step(u, cats, name_ids, kappa, margin, lr, tu, tvk)
        if L < 2:
            continue
        for a in range(L):
            wj = tokens_flat[start + a]
            lo = a - window
            if lo < 0:
                lo = 0
            hi = a + window
            if hi > L - 1:
                hi = L - 1
            for b in range(lo, hi + 1):
                if b == a:
                    continue
                wk = tokens_flat[start + b]
                lr = lr0 * (1.0 - t / total_pairs)
                if lr < lr_floor:
                    lr = lr_floor
                t += 1
                for s in range(negatives):
                    kneg = _sample_cdf(cdf, state)
                    jneg = _sample_cdf(cdf, state)
                    z = margin
                    for p in range(P):
                        uc = u[wj, p]
                        z += (v[kneg, p] - v[wk, p]) * uc
                        z += (u[jneg, p] - uc) * d[di, p]
                    if z <= 0.0:
                        continue
                    stats[0] += z
                    stats[1] += 1.0
                    for p in range(P):
                        tu[p] = u[wj, p]
                        tvk[p] = v[wk, p]
                        tvn[p] = v[kneg, p]
                        td[p] = d[di, p]
                        tun[p] = u[jneg, p]
                    for p in range(P):
                        u[wj, p] -= lr * (tvn[p] - tvk[p] - td[p])
                        v[wk, p] += lr * tu[p]
                        v[kneg, p] -= lr * tu[p]
                        d[di, p] -= lr * (tun[p] - tu[p])
                        u[jneg, p] -= lr * td[p]
                    _renorm_row(u, wj)
                    _renorm_row(v, wk)
                    _renorm_row(v, kneg)
                    _renorm_row(d, di)
                    _renorm_row(u, jneg)


# --- training driver -------------------------------------------------------


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if mat.shape[0] and norms.min() <= 0.0:
        raise DataError("zero-norm row while projecting to the sphere")
    return mat / norms


def init_space(corpus: Corpus, scenario: ScenarioSpec, cfg: EmbedConfig) -> EmbeddingSpace:
    """Gaussian directions, normalized row-wise (uniform on the sphere)."""
    rng = np.random.default_rng(cfg.seed)
    M, N, K, P = len(corpus.vocab), corpus.n_docs, scenario.n_categories, cfg.dim
    return EmbeddingSpace(
        word_keys=list(corpus.vocab.surfaces),
        doc_keys=corpus.doc_ids,
        cat_keys=list(scenario.names),
        words_center=_unit_rows(rng.standard_normal((M, P))),
        words_context=_unit_rows(rng.standard_normal((M, P))),
        docs=_unit_rows(rng.standard_normal((N, P))),
        cats=_unit_rows(rng.standard_normal((K, P))),
        kappa=cfg.kappa,
    )


def _pack_tokens(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(corpus.n_docs + 1, dtype=np.int64)
    for i, doc in enumerate(corpus.documents):
        offsets[i + 1] = offsets[i] + len(doc.tokens)
    flat = np.empty(offsets[-1], dtype=np.int32)
    for i, doc in enumerate(corpus.documents):
        flat[offsets[i]:offsets[i + 1]] = doc.tokens
    return flat, offsets


def _pairs_per_doc(lengths: np.ndarray, window: int) -> np.ndarray:
    """Ordered in-window (center, context) pair count per document."""
    L = lengths.astype(np.int64)
    full = 2 * (window * L - window * (window + 1) // 2)
    short = L * (L - 1)
    out = np.where(L > window, full, short)
    out[L < 2] = 0
    return out


def _stream_seed(seed: int, epoch: int, worker: int) -> np.uint64:
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for salt in (0x9E3779B97F4A7C15 * (epoch + 1), 0xD1B54A32D192ED03 * (worker + 1)):
        z = np.uint64((int(z) ^ salt) & 0xFFFFFFFFFFFFFFFF)
        z = np.uint64((int(z) * 0xBF58476D1CE4E5B9 + 1) & 0xFFFFFFFFFFFFFFFF)
    return z


def train(corpus: Corpus, scenario: ScenarioSpec, cfg: EmbedConfig,
          initial: EmbeddingSpace | None = None, workers: int = 1,
          ) -> tuple[EmbeddingSpace, list[float]]:
    """Train the spherical embedding; returns (space, per-epoch loss curve).

    The curve entry for an epoch is the mean of the *active* hinge losses
    seen during that epoch's sweep (0.0 if none fired).  Passing
    ``initial`` resumes from given vectors instead of random ones, which
    also makes equivariance properties testable.
    """
    cfg.validate()
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    space = init_space(corpus, scenario, cfg) if initial is None else initial
    if space.words_context is None:
        raise DataError("cannot continue training a space without context vectors")
    if space.words_center.shape != (len(corpus.vocab), cfg.dim):
        raise DataError("initial space does not match corpus/config shapes")

    sampler = NegativeSampler(corpus.vocab.counts, cfg.sample_power)
    flat, offsets = _pack_tokens(corpus)
    lengths = np.diff(offsets)
    ppd = _pairs_per_doc(lengths, cfg.window)
    pairs_per_epoch = int(ppd.sum())
    total_pairs = float(max(pairs_per_epoch * cfg.epochs, 1))

    u, v = space.words_center, space.words_context
    d, cats = space.docs, space.cats
    name_ids = np.asarray(scenario.token_ids, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0E17BED]))
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(corpus.n_docs).astype(np.int64)
        stats_all = np.zeros((max(workers, 1), 2))
        base = epoch * pairs_per_epoch
        chunks = np.array_split(order, workers)
        if workers == 1:
            state = np.array([_stream_seed(cfg.seed, epoch, 0)], dtype=np.uint64)
            _sweep(flat, offsets, chunks[0], u, v, d, cats, name_ids,
                   cfg.kappa, sampler.cdf, cfg.window, cfg.negatives,
                   cfg.margin, cfg.lr, cfg.lr_floor, total_pairs, base,
                   state, stats_all[0])
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = []
                for w, chunk in enumerate(chunks):
                    state = np.array([_stream_seed(cfg.seed, epoch, w)], dtype=np.uint64)
                    futures.append(pool.submit(
                        _sweep, flat, offsets, chunk, u, v, d, cats, name_ids,
                        cfg.kappa, sampler.cdf, cfg.window, cfg.negatives,
                        cfg.margin, cfg.lr, cfg.lr_floor, total_pairs, base,
                        state, stats_all[w]))
                    base += int(ppd[chunk].sum())
                for f in futures:
                    f.result()
        active_sum, active_n = stats_all.sum(axis=0)
        curve.append(float(active_sum / active_n) if active_n > 0 else 0.0)

    # one final projection; a no-op for single-worker runs, and it
    # restores exact unit norms after racy multi-worker updates
    space.words_center = _unit_rows(u)
    space.words_context = _unit_rows(v)
    space.docs = _unit_rows(d)
    space.cats = _unit_rows(cats) if cats.shape[0] else cats
    return space, curve


# --- persistence -----------------------------------------------------------
# Text format, one file per vector family: a "<count> <dim>" header line,
# then "<key> <x1> ... <xP>" rows.  %.16e carries 17 significant digits,
# enough to round-trip float64 exactly.

_VEC_FILES = {"words": "words.vec", "docs": "docs.vec", "cats": "cats.vec"}


def _write_vec(path: str, keys: list[str], mat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mat.shape[0]} {mat.shape[1]}\n")
        for key, row in zip(keys, mat):
            # keys are column-delimited by whitespace, so they must not contain any
            if key != "".join(key.split()) or not key:
                raise DataError(f"{path}: key {key!r} is empty or contains whitespace")
            fh.write(key + " " + " ".join(f"{x:.16e}" for x in row) + "\n")


def _read_vec(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: bad header line")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError as e:
            raise DataError(f"{path}: bad header line") from e
        keys, rows = [], np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise DataError(f"{path}: row {i} has {len(parts) - 1} values, expected {dim}")
            keys.append(parts[0])
            rows[i] = [float(x) for x in parts[1:]]
    return keys, rows


def save_vectors(space: EmbeddingSpace, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    _write_vec(os.path.join(dirpath, _VEC_FILES["words"]), space.word_keys, space.words_center)
    _write_vec(os.path.join(dirpath, _VEC_FILES["docs"]), space.doc_keys, space.docs)
    _write_vec(os.path.join(dirpath, _VEC_FILES["cats"]), space.cat_keys, space.cats)


def load_vectors(dirpath: str, kappa: float) -> EmbeddingSpace:
    word_keys, wc = _read_vec(os.path.join(dirpath, _VEC_FILES["words"]))
    doc_keys, dv = _read_vec(os.path.join(dirpath, _VEC_FILES["docs"]))
    cat_keys, cv = _read_vec(os.path.join(dirpath, _VEC_FILES["cats"]))
    if wc.shape[1] != dv.shape[1] or wc.shape[1] != cv.shape[1]:
        raise DataError(f"{dirpath}: vector families disagree on dimension")
    return EmbeddingSpace(word_keys, doc_keys, cat_keys, wc, None, dv, cv, kappa)
