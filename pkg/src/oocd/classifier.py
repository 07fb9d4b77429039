"""Text CNN trained on pseudo-labels, with optional self-training.

Kim-style architecture: embedding lookup (initialized from the spherical
word centers, trainable), per-width 1-D valid convolution + ReLU +
max-over-time pooling, concatenated features, dropout (train only), one
affine layer, softmax.  Everything is plain numpy with manual
backpropagation; Adam drives the updates.

The padding token occupies one extra embedding row pinned at zero; it
never receives gradient, so pad positions contribute ReLU(bias) at most
and real tokens win pooling whenever they produce anything positive.

Internally a batch is padded only to the longest document it contains
(plus window slack), not to the full maximum length.  That is exactly
equivalent to padding every document to the maximum length: a window
fully inside the padding contributes ReLU(bias), which is folded into
pooling analytically for documents short enough to have such windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, EmptyInput, TrainingDiverged

_PROB_FLOOR = 1e-12
_PREDICT_BATCH = 64


@dataclass
class CnnArch:
    n_classes: int
    emb_dim: int
    vocab_size: int
    widths: tuple[int, ...] = (2, 3, 4, 5)
    maps_per_width: int = 25
    max_len: int = 256
    dropout_keep: float = 0.5

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.emb_dim < 1 or self.vocab_size < 1:
            raise ConfigError("embedding shape must be positive")
        if not self.widths or len(set(self.widths)) != len(self.widths):
            raise ConfigError(f"widths must be non-empty and distinct, got {self.widths}")
        if min(self.widths) < 1 or max(self.widths) > self.max_len:
            raise ConfigError(f"widths must lie in [1, max_len], got {self.widths}")
        if self.maps_per_width < 1:
            raise ConfigError(f"maps_per_width must be >= 1, got {self.maps_per_width}")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ConfigError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")

    @property
    def n_features(self) -> int:
        return len(self.widths) * self.maps_per_width

    @property
    def pad_id(self) -> int:
        return self.vocab_size


@dataclass
class ClfTrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    refresh_every: int = 50
    delta: float = 0.001
    max_refreshes: int = 50

    def validate(self) -> None:
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.refresh_every < 1 or self.max_refreshes < 1:
            raise ConfigError("refresh_every and max_refreshes must be >= 1")
        if not (0.0 < self.delta <= 1.0):
            raise ConfigError(f"delta must be in (0, 1], got {self.delta}")


class ClassifierParams:
    """Parameter tensors plus Adam state.

    The embedding table has ``vocab_size + 1`` rows; the last row is the
    pad token, held at zero (its gradient is discarded, so Adam never
    moves it).  Optimizer state lives only in memory, not in the saved
    model file.
    """

    def __init__(self, arch: CnnArch, embedding, conv_w, conv_b, out_w, out_b):
        self.arch = arch
        self.embedding = embedding
        self.conv_w = conv_w  # width -> (width * emb_dim, maps)
        self.conv_b = conv_b  # width -> (maps,)
        self.out_w = out_w  # (n_features, n_classes)
        self.out_b = out_b  # (n_classes,)
        self.adam_m = {name: np.zeros_like(t) for name, t in self.tensor_items()}
        self.adam_v = {name: np.zeros_like(t) for name, t in self.tensor_items()}
        self.adam_step = 0

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        items = [("embedding", self.embedding)]
        for w in self.arch.widths:
            items.append((f"conv_w{w}", self.conv_w[w]))
            items.append((f"conv_b{w}", self.conv_b[w]))
        items.append(("out_w", self.out_w))
        items.append(("out_b", self.out_b))
        return items

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name == "embedding":
            self.embedding = value
        elif name == "out_w":
            self.out_w = value
        elif name == "out_b":
            self.out_b = value
        elif name.startswith("conv_w"):
            self.conv_w[int(name[6:])] = value
        elif name.startswith("conv_b"):
            self.conv_b[int(name[6:])] = value
        else:
            raise KeyError(name)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for _, t in self.tensor_items())


def init_params(arch: CnnArch, word_centers: np.ndarray, seed: int) -> ClassifierParams:
    """Glorot-uniform filters, zero biases, embedding copied from u_w."""
    arch.validate()
    if word_centers.shape != (arch.vocab_size, arch.emb_dim):
        raise DataError(
            f"word vectors {word_centers.shape} do not match arch "
            f"({arch.vocab_size}, {arch.emb_dim})"
        )
    rng = np.random.default_rng(seed)
    embedding = np.zeros((arch.vocab_size + 1, arch.emb_dim))
    embedding[: arch.vocab_size] = word_centers
    conv_w, conv_b = {}, {}
    for w in arch.widths:
        fan_in = w * arch.emb_dim
        limit = np.sqrt(6.0 / (fan_in + arch.maps_per_width))
        conv_w[w] = rng.uniform(-limit, limit, size=(fan_in, arch.maps_per_width))
        conv_b[w] = np.zeros(arch.maps_per_width)
    limit = np.sqrt(6.0 / (arch.n_features + arch.n_classes))
    out_w = rng.uniform(-limit, limit, size=(arch.n_features, arch.n_classes))
    return ClassifierParams(arch, embedding, conv_w, conv_b, out_w, np.zeros(arch.n_classes))


# --- forward / backward ----------------------------------------------------


def _encode_batch(arch: CnnArch, docs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Truncate to max_len, pad to the batch's working length."""
    lengths = np.array([min(len(t), arch.max_len) for t in docs], dtype=np.int64)
    if lengths.min(initial=1) < 1:
        raise EmptyInput("cannot encode a document with no tokens")
    width = min(arch.max_len, int(lengths.max()) + max(arch.widths) - 1)
    ids = np.full((len(docs), width), arch.pad_id, dtype=np.int64)
    for i, toks in enumerate(docs):
        ids[i, : lengths[i]] = toks[: lengths[i]]
    return ids, lengths


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p = np.maximum(p, _PROB_FLOOR)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _forward_batch(params: ClassifierParams, ids: np.ndarray, lengths: np.ndarray,
                   dropout_rng: np.random.Generator | None):
    arch = params.arch
    X = params.embedding[ids]  # (B, W, P)
    B, W, _ = X.shape
    cache: dict = {"ids": ids, "lengths": lengths, "per_width": {}}
    parts = []
    for w in arch.widths:
        Lw = W - w + 1
        windows = np.lib.stride_tricks.sliding_window_view(X, w, axis=1)
        cols = windows.transpose(0, 1, 3, 2).reshape(B * Lw, w * arch.emb_dim)
        pre = (cols @ params.conv_w[w] + params.conv_b[w]).reshape(B, Lw, -1)
        relu = np.maximum(pre, 0.0)

        n_pos = np.minimum(lengths, arch.max_len - w + 1)  # content window starts
        content = np.arange(Lw)[None, :] < n_pos[:, None]
        masked = np.where(content[:, :, None], relu, -np.inf)
        pooled_content = masked.max(axis=1)
        winner = masked.argmax(axis=1)

        # documents short enough to leave all-pad windows inside the
        # conceptual max_len buffer also compete against ReLU(bias)
        has_pad = (lengths < arch.max_len - w + 1)[:, None]
        pad_val = np.maximum(params.conv_b[w], 0.0)[None, :]
        pooled = np.where(has_pad, np.maximum(pooled_content, pad_val), pooled_content)
        pad_wins = has_pad & (pad_val > pooled_content)

        parts.append(pooled)
        cache["per_width"][w] = {
            "cols": cols, "gate": pre > 0.0, "winner": winner,
            "pad_wins": pad_wins, "Lw": Lw,
        }
    feat = np.concatenate(parts, axis=1)
    if dropout_rng is not None and arch.dropout_keep < 1.0:
        mask = (dropout_rng.random(feat.shape) < arch.dropout_keep) / arch.dropout_keep
        feat = feat * mask
        cache["dropout"] = mask
    cache["feat"] = feat
    probs = _softmax_rows(feat @ params.out_w + params.out_b)
    return probs, cache


def _backward_batch(params: ClassifierParams, cache: dict, dlogits: np.ndarray):
    arch = params.arch
    grads = {
        "out_w": cache["feat"].T @ dlogits,
        "out_b": dlogits.sum(axis=0),
    }
    dfeat = dlogits @ params.out_w.T
    if "dropout" in cache:
        dfeat = dfeat * cache["dropout"]

    ids = cache["ids"]
    B, W = ids.shape
    dX = np.zeros((B, W, arch.emb_dim))
    F = arch.maps_per_width
    for wi, w in enumerate(arch.widths):
        cw = cache["per_width"][w]
        Lw = cw["Lw"]
        dpool = dfeat[:, wi * F:(wi + 1) * F]

        dconv = np.zeros((B, Lw, F))
        content_grad = np.where(cw["pad_wins"], 0.0, dpool)
        np.put_along_axis(dconv, cw["winner"][:, None, :], content_grad[:, None, :], axis=1)
        dconv *= cw["gate"]

        dflat = dconv.reshape(B * Lw, F)
        grads[f"conv_w{w}"] = cw["cols"].T @ dflat
        # bias feeds every position plus the analytic all-pad window
        pad_gate = (params.conv_b[w] > 0.0)[None, :]
        grads[f"conv_b{w}"] = dflat.sum(axis=0) + (dpool * cw["pad_wins"] * pad_gate).sum(axis=0)

        dcols = (dflat @ params.conv_w[w].T).reshape(B, Lw, w, arch.emb_dim)
        for off in range(w):
            dX[:, off:off + Lw] += dcols[:, :, off, :]

    dE = np.zeros_like(params.embedding)
    np.add.at(dE, ids.reshape(-1), dX.reshape(-1, arch.emb_dim))
    dE[arch.pad_id] = 0.0  # pad row frozen
    grads["embedding"] = dE
    return grads


def loss_and_grads(params: ClassifierParams, docs: list[np.ndarray],
                   targets: np.ndarray,
                   dropout_rng: np.random.Generator | None = None):
    """Mean cross-entropy of ``targets`` rows against predictions + grads.

    Covers both training losses: pseudo-label rows give the pre-training
    objective, self-training target rows give the refinement objective.
    With ``dropout_rng`` None the network runs deterministically, which
    is what finite-difference checks need.
    """
    ids, lengths = _encode_batch(params.arch, docs)
    probs, cache = _forward_batch(params, ids, lengths, dropout_rng)
    B = len(docs)
    loss = float(-(targets * np.log(probs)).sum() / B)
    grads = _backward_batch(params, cache, (probs - targets) / B)
    return loss, grads


def forward(params: ClassifierParams, tokens: np.ndarray) -> np.ndarray:
    """Class probabilities for one document."""
    if len(tokens) == 0:
        raise EmptyInput("document has no tokens after encoding")
    ids, lengths = _encode_batch(params.arch, [np.asarray(tokens, dtype=np.int64)])
    probs, _ = _forward_batch(params, ids, lengths, None)
    return probs[0]


def predict(params: ClassifierParams, docs: list[np.ndarray]) -> np.ndarray:
    """Batched probabilities over non-empty documents."""
    out = np.empty((len(docs), params.arch.n_classes))
    for s in range(0, len(docs), _PREDICT_BATCH):
        chunk = docs[s:s + _PREDICT_BATCH]
        ids, lengths = _encode_batch(params.arch, chunk)
        out[s:s + len(chunk)], _ = _forward_batch(params, ids, lengths, None)
    return out


# --- optimization ----------------------------------------------------------


def _adam_step(params: ClassifierParams, grads: dict, cfg: ClfTrainConfig) -> None:
    params.adam_step += 1
    t = params.adam_step
    for name, tensor in params.tensor_items():
        g = grads[name]
        m = params.adam_m[name]
        v = params.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1 ** t)
        vhat = v / (1.0 - cfg.beta2 ** t)
        tensor -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def pretrain(params: ClassifierParams, docs: list[np.ndarray], targets: np.ndarray,
             cfg: ClfTrainConfig, rng: np.random.Generator) -> list[float]:
    """Minimize cross-entropy against fixed soft targets; per-epoch means."""
    cfg.validate()
    if not docs:
        raise DataError("pre-training needs a non-empty document set")
    if targets.shape != (len(docs), params.arch.n_classes):
        raise DataError(f"target matrix {targets.shape} does not match inputs")
    curve = []
    n = len(docs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            loss, grads = loss_and_grads(
                params, [docs[i] for i in batch], targets[batch], dropout_rng=rng)
            _adam_step(params, grads, cfg)
            total += loss * len(batch)
        mean_loss = total / n
        if not np.isfinite(mean_loss) or not params.all_finite():
            raise TrainingDiverged(f"non-finite loss or parameters at epoch {epoch}")
        curve.append(mean_loss)
    return curve


@dataclass
class SelfTrainTarget:
    q: np.ndarray  # (N', K) sharpened target rows
    f: np.ndarray  # (K,) soft class frequencies


def self_train_targets(predictions: np.ndarray) -> SelfTrainTarget:
    """q(c|d) proportional to p(c|d)^2 / f(c), f(c) = column sums of p."""
    p = np.asarray(predictions, dtype=np.float64)
    f = p.sum(axis=0)
    if np.any(f <= 0.0):
        raise DataError("soft frequencies must be positive")
    raw = p * p / f
    return SelfTrainTarget(raw / raw.sum(axis=1, keepdims=True), f)


def self_train(params: ClassifierParams, docs: list[np.ndarray],
               cfg: ClfTrainConfig, rng: np.random.Generator) -> list[dict]:
    """Refine against self-targets; refresh q every ``refresh_every`` batches.

    Stops once the fraction of documents whose hard label changed since
    the previous refresh drops below ``delta``, or after
    ``max_refreshes`` intervals.  Returns one log record per interval.
    """
    cfg.validate()
    if not docs:
        raise DataError("self-training needs a non-empty document set")
    preds = predict(params, docs)
    target = self_train_targets(preds)
    prev_hard = preds.argmax(axis=1)

    n = len(docs)
    log: list[dict] = []

    def batches():
        while True:
            order = rng.permutation(n)
            for s in range(0, n, cfg.batch_size):
                yield order[s:s + cfg.batch_size]

    stream = batches()
    for refresh in range(1, cfg.max_refreshes + 1):
        total, seen = 0.0, 0
        for _ in range(cfg.refresh_every):
            batch = next(stream)
            loss, grads = loss_and_grads(
                params, [docs[i] for i in batch], target.q[batch], dropout_rng=rng)
            _adam_step(params, grads, cfg)
            total += loss * len(batch)
            seen += len(batch)
        mean_loss = total / seen
        if not np.isfinite(mean_loss) or not params.all_finite():
            raise TrainingDiverged(f"non-finite loss or parameters at refresh {refresh}")
        preds = predict(params, docs)
        hard = preds.argmax(axis=1)
        changed = float(np.mean(hard != prev_hard))
        log.append({"refresh": refresh, "changed": changed, "mean_loss": mean_loss})
        target = self_train_targets(preds)
        prev_hard = hard
        if changed < cfg.delta:
            break
    return log


# --- confidence ------------------------------------------------------------


def conf_clf(params: ClassifierParams, docs: list[np.ndarray],
             mode: str = "msp") -> tuple[np.ndarray, np.ndarray]:
    """Per-document confidence; empty documents get the score's minimum.

    msp: max_c p(c|d).  entropy: sum_c p log p (negative entropy).
    Returns (confidence, empty-document flags); flagged entries carry
    1/K resp. -log K, the lowest value each mode can produce.
    """
    if mode not in ("msp", "entropy"):
        raise ConfigError(f"confidence mode must be msp or entropy, got {mode!r}")
    K = params.arch.n_classes
    floor = 1.0 / K if mode == "msp" else -float(np.log(K))
    conf = np.full(len(docs), floor)
    empty = np.array([len(t) == 0 for t in docs], dtype=bool)
    nonempty = [i for i, t in enumerate(docs) if len(t)]
    if nonempty:
        probs = predict(params, [docs[i] for i in nonempty])
        if mode == "msp":
            vals = probs.max(axis=1)
        else:
            vals = (probs * np.log(probs)).sum(axis=1)
        conf[nonempty] = vals
    return conf, empty


# --- persistence -----------------------------------------------------------
# Self-describing container: magic line, little-endian uint64 header
# length, JSON header (arch + tensor manifest), then raw C-order bytes
# for each tensor in manifest order.

_MODEL_MAGIC = b"OOCD-CNN-V1\n"


def save_model(params: ClassifierParams, path: str) -> None:
    import json

    arch = params.arch
    tensors = params.tensor_items()
    header = {
        "arch": {
            "n_classes": arch.n_classes,
            "emb_dim": arch.emb_dim,
            "vocab_size": arch.vocab_size,
            "widths": list(arch.widths),
            "maps_per_width": arch.maps_per_width,
            "max_len": arch.max_len,
            "dropout_keep": arch.dropout_keep,
        },
        "tensors": [
            {"name": name, "shape": list(t.shape), "dtype": t.dtype.str}
            for name, t in tensors
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t).tobytes())


def load_model(path: str) -> ClassifierParams:
    import json

    with open(path, "rb") as fh:
        magic = fh.read(len(_MODEL_MAGIC))
        if magic != _MODEL_MAGIC:
            raise DataError(f"{path}: not a model file (bad magic {magic!r})")
        blob_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(blob_len).decode("utf-8"))
        except Exception as e:
            raise DataError(f"{path}: corrupt model header: {e}") from e
        a = header["arch"]
        arch = CnnArch(
            n_classes=a["n_classes"], emb_dim=a["emb_dim"], vocab_size=a["vocab_size"],
            widths=tuple(a["widths"]), maps_per_width=a["maps_per_width"],
            max_len=a["max_len"], dropout_keep=a["dropout_keep"],
        )
        arch.validate()
        loaded = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            dt = np.dtype(spec["dtype"])
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise DataError(f"{path}: truncated tensor {spec['name']}")
            loaded[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    expected = {"embedding", "out_w", "out_b"}
    expected |= {f"conv_w{w}" for w in arch.widths} | {f"conv_b{w}" for w in arch.widths}
    if set(loaded) != expected:
        raise DataError(f"{path}: tensor set mismatch: {sorted(loaded)}")
    params = ClassifierParams(
        arch, loaded["embedding"],
        {w: loaded[f"conv_w{w}"] for w in arch.widths},
        {w: loaded[f"conv_b{w}"] for w in arch.widths},
        loaded["out_w"], loaded["out_b"],
    )
    return params
