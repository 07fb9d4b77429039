"""Command line driver: stages, artifacts, and the run manifest.

Every stage reads its inputs from the working directory and writes its
outputs back there, so subcommands compose through the filesystem:

    corpus.jsonl + scenario.json
        -> ingest  -> corpus.bin
        -> embed   -> vectors/{words,docs,cats}.vec
        -> pseudo  -> pseudo.csv
        -> train   -> model-pretrain.bin, model.bin
        -> score   -> scores.csv
        -> eval    -> report.json

``manifest.json`` records, per stage, the sha256 of every input and
output plus the stage config and seed.  ``pipeline`` uses it to skip
stages whose recorded entry still matches, and any stage refuses to
consume an artifact whose bytes differ from what its producer recorded.

Options resolve in three layers: dataclass defaults, then a TOML config
file, then command line flags.  The fully resolved config is echoed into
the manifest on every invocation.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import corpus as corpus_io
from . import detect, embed, pseudo, synth
from . import classifier
from .classifier import ClfTrainConfig, CnnArch
from .embed import EmbedConfig
from .errors import (
    ConfigError,
    DataError,
    MissingArtifact,
    OocdError,
    StaleArtifact,
    TrainingDiverged,
)

_MANIFEST = "manifest.json"
_VEC_PATHS = ("vectors/words.vec", "vectors/docs.vec", "vectors/cats.vec")

# which stage writes which workdir artifact, for missing-input messages
_ARTIFACT_PRODUCERS = {
    "corpus.bin": "ingest",
    "vectors/words.vec": "embed",
    "vectors/docs.vec": "embed",
    "vectors/cats.vec": "embed",
    "pseudo.csv": "pseudo",
    "model-pretrain.bin": "train",
    "model.bin": "train",
    "scores.csv": "score",
    "report.json": "eval",
}

_PIPELINE_ORDER = ("ingest", "embed", "pseudo", "train", "score", "eval")


# --- resolved configuration ------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything a run needs, after defaults, TOML, and flags are merged."""

    corpus_path: str | None = None
    scenario_path: str | None = None
    workdir: str = "."
    seed: int = 0
    workers: int = 1
    min_freq: int = 5
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    relevance: str = "direct"
    k: int = 30
    j: int = 30
    temperature: float = 0.1
    keep_ratio: float | None = 0.5
    tau: float | None = None
    widths: tuple[int, ...] = (2, 3, 4, 5)
    maps_per_width: int = 25
    max_len: int = 256
    dropout_keep: float = 0.5
    clf: ClfTrainConfig = field(default_factory=ClfTrainConfig)
    confidence: str = "msp"
    baseline: str | None = None
    lof_k: int = 20
    report_dir: str | None = None
    no_filter: bool = False
    temperature_off: bool = False
    no_self_train: bool = False
    emb_only: bool = False

    def effective_temperature(self) -> float:
        return 1.0 if self.temperature_off else self.temperature

    def effective_filter(self) -> tuple[float | None, float | None]:
        """(tau, keep_ratio) as passed to the confidence filter."""
        if self.no_filter:
            return None, 1.0
        if self.tau is not None:
            return self.tau, None
        return None, self.keep_ratio if self.keep_ratio is not None else 0.5

    def validate(self) -> None:
        if self.relevance not in ("direct", "proximity"):
            raise ConfigError(f"relevance must be direct or proximity, got {self.relevance!r}")
        if self.confidence not in ("msp", "entropy"):
            raise ConfigError(f"confidence must be msp or entropy, got {self.confidence!r}")
        if self.baseline not in (None, "ancs", "lof", "smclass"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.baseline is not None and self.emb_only:
            raise ConfigError("--baseline and --emb-only are mutually exclusive")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.min_freq < 1:
            raise ConfigError(f"min_freq must be >= 1, got {self.min_freq}")
        if self.k < 1 or self.j < 1:
            raise ConfigError("k and j must be >= 1")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.keep_ratio is not None and not (0.0 < self.keep_ratio <= 1.0):
            raise ConfigError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")
        if self.lof_k < 1:
            raise ConfigError(f"lof_k must be >= 1, got {self.lof_k}")
        self.embed.validate()
        self.clf.validate()
        CnnArch(2, 1, 1, self.widths, self.maps_per_width, self.max_len,
                self.dropout_keep).validate()

    def arch_for(self, n_classes: int, emb_dim: int, vocab_size: int) -> CnnArch:
        return CnnArch(n_classes, emb_dim, vocab_size, self.widths,
                       self.maps_per_width, self.max_len, self.dropout_keep)

    def to_dict(self) -> dict:
        return {
            "pipeline": {
                "corpus": self.corpus_path,
                "scenario": self.scenario_path,
                "workdir": self.workdir,
                "seed": self.seed,
                "workers": self.workers,
                "min_freq": self.min_freq,
                "no_filter": self.no_filter,
                "temperature_off": self.temperature_off,
                "no_self_train": self.no_self_train,
                "emb_only": self.emb_only,
            },
            "embed": dataclasses.asdict(self.embed),
            "pseudo": {
                "relevance": self.relevance,
                "k": self.k,
                "j": self.j,
                "temperature": self.temperature,
                "keep_ratio": self.keep_ratio,
                "tau": self.tau,
            },
            "classifier": {
                "filters": list(self.widths),
                "maps": self.maps_per_width,
                "max_len": self.max_len,
                "dropout_keep": self.dropout_keep,
                "lr": self.clf.lr,
                "epochs": self.clf.epochs,
                "batch_size": self.clf.batch_size,
                "refresh_every": self.clf.refresh_every,
                "delta": self.clf.delta,
                "max_refreshes": self.clf.max_refreshes,
                "confidence": self.confidence,
            },
            "detect": {
                "baseline": self.baseline,
                "lof_k": self.lof_k,
                "report_dir": self.report_dir,
            },
        }


def _coerce(value, typ, where: str):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected an integer, got a boolean")
    if not isinstance(value, typ):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}")
    return value


def _set_path(cfg: PipelineConfig, attr: str, value) -> None:
    obj = cfg
    parts = attr.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    setattr(obj, parts[-1], value)


def _widths_from(value, where: str) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{where}: expected a non-empty list of window widths")
    return tuple(_coerce(v, int, where) for v in value)


# (toml key) -> (config attribute path, type); bool-typed keys may only appear
# under [pipeline], matching the on/off command line switches
_TOML_SCHEMA = {
    "pipeline": {
        "corpus": ("corpus_path", str),
        "scenario": ("scenario_path", str),
        "workdir": ("workdir", str),
        "seed": ("seed", int),
        "workers": ("workers", int),
        "min_freq": ("min_freq", int),
        "no_filter": ("no_filter", bool),
        "temperature_off": ("temperature_off", bool),
        "no_self_train": ("no_self_train", bool),
        "emb_only": ("emb_only", bool),
    },
    "embed": {
        "dim": ("embed.dim", int),
        "window": ("embed.window", int),
        "negatives": ("embed.negatives", int),
        "margin": ("embed.margin", float),
        "lr": ("embed.lr", float),
        "lr_floor": ("embed.lr_floor", float),
        "epochs": ("embed.epochs", int),
        "kappa": ("embed.kappa", float),
        "sample_power": ("embed.sample_power", float),
    },
    "pseudo": {
        "relevance": ("relevance", str),
        "k": ("k", int),
        "j": ("j", int),
        "temperature": ("temperature", float),
        "keep_ratio": ("keep_ratio", float),
        "tau": ("tau", float),
    },
    "classifier": {
        "filters": ("widths", list),
        "maps": ("maps_per_width", int),
        "max_len": ("max_len", int),
        "dropout_keep": ("dropout_keep", float),
        "lr": ("clf.lr", float),
        "epochs": ("clf.epochs", int),
        "batch_size": ("clf.batch_size", int),
        "refresh_every": ("clf.refresh_every", int),
        "delta": ("clf.delta", float),
        "max_refreshes": ("clf.max_refreshes", int),
        "confidence": ("confidence", str),
    },
    "detect": {
        "baseline": ("baseline", str),
        "lof_k": ("lof_k", int),
        "report_dir": ("report_dir", str),
    },
}

# argparse dest -> config attribute path (value flags; booleans handled apart)
_FLAG_MAP = {
    "corpus": "corpus_path",
    "scenario": "scenario_path",
    "workdir": "workdir",
    "seed": "seed",
    "workers": "workers",
    "min_freq": "min_freq",
    "dim": "embed.dim",
    "window": "embed.window",
    "negatives": "embed.negatives",
    "margin": "embed.margin",
    "lr": "embed.lr",
    "epochs": "embed.epochs",
    "kappa": "embed.kappa",
    "relevance": "relevance",
    "k": "k",
    "j": "j",
    "temperature": "temperature",
    "keep_ratio": "keep_ratio",
    "tau": "tau",
    "filters": "widths",
    "maps": "maps_per_width",
    "maxlen": "max_len",
    "dropout": "dropout_keep",
    "clf_lr": "clf.lr",
    "clf_epochs": "clf.epochs",
    "refresh_every": "clf.refresh_every",
    "delta": "clf.delta",
    "confidence": "confidence",
    "baseline": "baseline",
    "lof_k": "lof_k",
    "report_dir": "report_dir",
}

_SWITCHES = ("no_filter", "temperature_off", "no_self_train", "emb_only")


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge defaults <- TOML file <- flags into one validated config."""
    cfg = PipelineConfig()
    explicit: set[str] = set()

    path = getattr(args, "config", None)
    if path:
        data = _load_toml(path)
        for section, table in data.items():
            schema = _TOML_SCHEMA.get(section)
            if schema is None:
                if section == "synth":
                    continue  # consumed by the synth subcommand only
                raise ConfigError(f"{path}: unknown section [{section}]")
            if not isinstance(table, dict):
                raise ConfigError(f"{path}: [{section}] must be a table")
            for key, value in table.items():
                if key not in schema:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                attr, typ = schema[key]
                where = f"{path}: [{section}] {key}"
                if attr == "widths":
                    value = _widths_from(value, where)
                else:
                    value = _coerce(value, typ, where)
                _set_path(cfg, attr, value)
                explicit.add(attr)

    for dest, attr in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(cfg, attr, value)
            explicit.add(attr)
    for dest in _SWITCHES:
        if getattr(args, dest, False):
            setattr(cfg, dest, True)

    if "tau" in explicit and "keep_ratio" in explicit:
        raise ConfigError("give either tau or keep_ratio, not both")
    if "tau" in explicit:
        cfg.keep_ratio = None

    cfg.embed.seed = cfg.seed  # one global seed drives every stage
    cfg.validate()
    return cfg


# --- manifest --------------------------------------------------------------


@dataclass
class StageSpec:
    name: str
    inputs: list[str]
    outputs: list[str]
    config: dict
    fn: Callable[[], None]


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _normalize(obj):
    # JSON round-trip so in-memory entries compare equal to reloaded ones
    return json.loads(json.dumps(obj, sort_keys=True))


def _load_manifest(workdir: str) -> dict:
    path = os.path.join(workdir, _MANIFEST)
    if not os.path.exists(path):
        return {"version": 1, "config": {}, "stages": {}}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            man = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(man, dict) or "stages" not in man:
        raise DataError(f"{path}: not a run manifest")
    return man


def _save_manifest(workdir: str, manifest: dict) -> None:
    path = os.path.join(workdir, _MANIFEST)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def _artifact_path(cfg: PipelineConfig, name: str) -> str:
    if name in _ARTIFACT_PRODUCERS:
        return os.path.join(cfg.workdir, name)
    return name  # external file, e.g. the raw corpus


def _run_stage(cfg: PipelineConfig, spec: StageSpec, manifest: dict,
               resume: bool) -> bool:
    """Run one stage, or skip it if the manifest proves it is current.

    Returns True if the stage ran.  Raises MissingArtifact when an input
    does not exist and StaleArtifact when on-disk bytes disagree with
    what the manifest recorded.
    """
    in_hashes = {}
    for name in spec.inputs:
        path = _artifact_path(cfg, name)
        if not os.path.exists(path):
            producer = _ARTIFACT_PRODUCERS.get(name)
            if producer is not None:
                raise MissingArtifact(path, producer)
            raise DataError(f"input file {path} does not exist")
        in_hashes[name] = _hash_file(path)

    stages = manifest.setdefault("stages", {})
    for name, digest in in_hashes.items():
        producer = _ARTIFACT_PRODUCERS.get(name)
        if producer is not None and producer in stages:
            recorded = stages[producer].get("outputs", {}).get(name)
            if recorded is not None and recorded != digest:
                raise StaleArtifact(
                    _artifact_path(cfg, name),
                    f"bytes differ from what the {producer!r} stage recorded; "
                    f"re-run {producer!r}",
                )

    entry = _normalize({"inputs": in_hashes, "config": spec.config, "seed": cfg.seed})
    stored = stages.get(spec.name)
    if (resume and stored is not None
            and all(stored.get(key) == entry[key] for key in ("inputs", "config", "seed"))):
        recorded = stored.get("outputs", {})
        paths = {name: _artifact_path(cfg, name) for name in spec.outputs}
        if set(recorded) == set(spec.outputs) and all(
                os.path.exists(p) for p in paths.values()):
            for name, path in paths.items():
                if _hash_file(path) != recorded[name]:
                    raise StaleArtifact(
                        path, "output changed on disk after it was recorded")
            print(f"{spec.name}: up to date, skipped")
            return False

    spec.fn()

    entry["outputs"] = {}
    for name in spec.outputs:
        path = _artifact_path(cfg, name)
        if not os.path.exists(path):
            raise DataError(f"stage {spec.name} did not produce {path}")
        entry["outputs"][name] = _hash_file(path)
    stages[spec.name] = entry
    _save_manifest(cfg.workdir, manifest)
    return True


# --- stage bodies ----------------------------------------------------------


def _wp(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.workdir, name)


def _method_tag(cfg: PipelineConfig) -> str:
    if cfg.baseline is not None:
        return cfg.baseline
    family = "vmf" if cfg.emb_only else "oocd"
    return family + ("_d" if cfg.relevance == "direct" else "_w")


def _load_workdir_corpus(cfg: PipelineConfig):
    return corpus_io.load_corpus(_wp(cfg, "corpus.bin"))


def _load_workdir_vectors(cfg: PipelineConfig) -> embed.EmbeddingSpace:
    return embed.load_vectors(_wp(cfg, "vectors"), cfg.embed.kappa)


def _stage_ingest(cfg: PipelineConfig) -> None:
    raws = corpus_io.read_corpus_jsonl(cfg.corpus_path)
    names = corpus_io.read_scenario_json(cfg.scenario_path)
    corp = corpus_io.build_corpus(raws, min_freq=cfg.min_freq)
    scen = corpus_io.resolve_category_names(corp, names)
    corpus_io.save_corpus(corp, scen, _wp(cfg, "corpus.bin"))
    print(f"ingest: {corp.n_docs} documents, vocab {len(corp.vocab)}, "
          f"{scen.n_categories} categories")


def _stage_embed(cfg: PipelineConfig) -> None:
    corp, scen = _load_workdir_corpus(cfg)
    space, curve = embed.train(corp, scen, cfg.embed, workers=cfg.workers)
    embed.save_vectors(space, _wp(cfg, "vectors"))
    print(f"embed: {cfg.embed.epochs} epochs, "
          f"mean active hinge {curve[0]:.4f} -> {curve[-1]:.4f}")


def _stage_pseudo(cfg: PipelineConfig) -> None:
    space = _load_workdir_vectors(cfg)
    if cfg.relevance == "direct":
        rel = pseudo.relevance_direct(space)
    else:
        index = pseudo.build_neighbor_index(space, k=cfg.k, j=cfg.j)
        rel = pseudo.relevance_proximity(space, index)
    labels = pseudo.pseudo_labels(rel, temperature=cfg.effective_temperature())
    tau, ratio = cfg.effective_filter()
    confident = pseudo.filter_confident(labels, tau=tau, keep_ratio=ratio)
    pseudo.save_pseudo(labels, confident, _wp(cfg, "pseudo.csv"))
    print(f"pseudo: {rel.variant} relevance, kept {len(confident)} of "
          f"{len(labels.doc_keys)} documents (tau={confident.threshold:.6g})")


def _training_set(cfg: PipelineConfig):
    """Confident, non-empty documents with their pseudo-label targets."""
    corp, scen = _load_workdir_corpus(cfg)
    labels, kept = pseudo.load_pseudo(_wp(cfg, "pseudo.csv"),
                                      cfg.effective_temperature())
    if labels.doc_keys != corp.doc_ids:
        raise DataError("pseudo.csv does not cover the ingested documents; "
                        "re-run the pseudo stage")
    if labels.n_categories != scen.n_categories:
        raise DataError(f"pseudo.csv has {labels.n_categories} categories, "
                        f"scenario has {scen.n_categories}")
    idx = [i for i in np.flatnonzero(kept) if not corp.documents[i].is_empty]
    if not idx:
        raise DataError("no non-empty documents survived confidence filtering")
    docs = [corp.documents[i].tokens for i in idx]
    targets = labels.labels[np.asarray(idx, dtype=np.int64)]
    return corp, scen, docs, targets


def _stage_train(cfg: PipelineConfig) -> None:
    corp, scen, docs, targets = _training_set(cfg)
    space = _load_workdir_vectors(cfg)
    arch = cfg.arch_for(scen.n_categories, space.dim, len(space.word_keys))
    params = classifier.init_params(arch, space.words_center, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC1A]))
    curve = classifier.pretrain(params, docs, targets, cfg.clf, rng)
    classifier.save_model(params, _wp(cfg, "model-pretrain.bin"))
    if cfg.no_self_train:
        shutil.copyfile(_wp(cfg, "model-pretrain.bin"), _wp(cfg, "model.bin"))
        print(f"train: {len(docs)} documents, pretrain loss "
              f"{curve[0]:.4f} -> {curve[-1]:.4f}, self-training disabled")
        return
    log = classifier.self_train(params, docs, cfg.clf, rng)
    classifier.save_model(params, _wp(cfg, "model.bin"))
    changed = log[-1]["changed"] if log else 0.0
    print(f"train: {len(docs)} documents, pretrain loss "
          f"{curve[0]:.4f} -> {curve[-1]:.4f}, "
          f"{len(log)} self-train refreshes (last changed {changed:.4f})")


def _stage_score(cfg: PipelineConfig) -> None:
    corp, scen = _load_workdir_corpus(cfg)
    tag = _method_tag(cfg)
    if cfg.baseline == "ancs":
        scored = detect.baseline_ancs(_load_workdir_vectors(cfg))
    elif cfg.baseline == "lof":
        scored = detect.baseline_lof(_load_workdir_vectors(cfg), k=cfg.lof_k)
    elif cfg.baseline == "smclass":
        space = _load_workdir_vectors(cfg)
        arch = cfg.arch_for(scen.n_categories, space.dim, len(space.word_keys))
        scored = detect.baseline_smclass(corp, scen, space, arch, cfg.clf, cfg.seed)
    elif cfg.emb_only:
        labels, _ = pseudo.load_pseudo(_wp(cfg, "pseudo.csv"),
                                       cfg.effective_temperature())
        if labels.doc_keys != corp.doc_ids:
            raise DataError("pseudo.csv does not cover the ingested documents")
        scored = detect.ScoredCorpus(labels.doc_keys, labels.conf, tag)
    else:
        params = classifier.load_model(_wp(cfg, "model.bin"))
        conf, _ = classifier.conf_clf(params, [d.tokens for d in corp.documents],
                                      mode=cfg.confidence)
        scored = detect.ScoredCorpus(corp.doc_ids, conf, tag)

    if scored.doc_keys != corp.doc_ids:
        raise DataError("scored documents do not match the ingested corpus")
    gold = corp.gold_labels()
    truth = detect.ground_truth(corp, scen) if all(g is not None for g in gold) else None
    detect.write_scores(scored, truth, gold if truth is not None else None,
                        _wp(cfg, "scores.csv"))
    print(f"score: method {tag}, {len(scored.doc_keys)} documents")


def _stage_eval(cfg: PipelineConfig) -> None:
    corp, scen = _load_workdir_corpus(cfg)
    keys, conf, _ = detect.read_scores(_wp(cfg, "scores.csv"))
    if keys != corp.doc_ids:
        raise DataError("scores.csv does not match the ingested corpus")
    manifest = _load_manifest(cfg.workdir)
    score_entry = manifest.get("stages", {}).get("score")
    if score_entry is None:
        raise DataError("scores.csv has no manifest record; run the score stage")
    method = score_entry["config"]["method"]
    scored = detect.ScoredCorpus(keys, conf, method)
    truth = detect.ground_truth(corp, scen)
    report = detect.evaluate(scored, truth)
    detect.write_report(report, _wp(cfg, "report.json"))
    if cfg.report_dir:
        os.makedirs(cfg.report_dir, exist_ok=True)
        detect.write_report(report, os.path.join(
            cfg.report_dir, f"report-{method}-seed{cfg.seed}.json"))
    print(f"eval: {method} auroc={report.auroc:.4f} aupr={report.aupr:.4f} "
          f"f1_at_o={report.f1_at_o:.4f} (o={report.o}, n={report.n})")


def _spec_for(cfg: PipelineConfig, name: str) -> StageSpec:
    if name == "ingest":
        if not cfg.corpus_path or not cfg.scenario_path:
            raise ConfigError("ingest needs a corpus and a scenario "
                              "(--corpus/--scenario or the config file)")
        return StageSpec("ingest", [cfg.corpus_path, cfg.scenario_path],
                         ["corpus.bin"], {"min_freq": cfg.min_freq},
                         lambda: _stage_ingest(cfg))
    if name == "embed":
        config = dataclasses.asdict(cfg.embed)
        config["workers"] = cfg.workers
        return StageSpec("embed", ["corpus.bin"], list(_VEC_PATHS), config,
                         lambda: _stage_embed(cfg))
    if name == "pseudo":
        tau, ratio = cfg.effective_filter()
        config = {
            "relevance": cfg.relevance,
            "k": cfg.k,
            "j": cfg.j,
            "kappa": cfg.embed.kappa,
            "temperature": cfg.effective_temperature(),
            "tau": tau,
            "keep_ratio": ratio,
        }
        return StageSpec("pseudo", list(_VEC_PATHS), ["pseudo.csv"], config,
                         lambda: _stage_pseudo(cfg))
    if name == "train":
        config = {
            "filters": list(cfg.widths),
            "maps": cfg.maps_per_width,
            "max_len": cfg.max_len,
            "dropout_keep": cfg.dropout_keep,
            "clf": dataclasses.asdict(cfg.clf),
            "no_self_train": cfg.no_self_train,
        }
        return StageSpec("train", ["corpus.bin", *_VEC_PATHS, "pseudo.csv"],
                         ["model-pretrain.bin", "model.bin"], config,
                         lambda: _stage_train(cfg))
    if name == "score":
        config = {
            "method": _method_tag(cfg),
            "confidence": cfg.confidence,
            "baseline": cfg.baseline,
            "emb_only": cfg.emb_only,
        }
        inputs = ["corpus.bin"]
        if cfg.baseline in ("ancs", "lof"):
            inputs += list(_VEC_PATHS)
            if cfg.baseline == "lof":
                config["lof_k"] = cfg.lof_k
        elif cfg.baseline == "smclass":
            inputs += list(_VEC_PATHS)
            config.update({
                "filters": list(cfg.widths),
                "maps": cfg.maps_per_width,
                "max_len": cfg.max_len,
                "dropout_keep": cfg.dropout_keep,
                "clf": dataclasses.asdict(cfg.clf),
            })
        elif cfg.emb_only:
            inputs.append("pseudo.csv")
        else:
            inputs.append("model.bin")
        return StageSpec("score", inputs, ["scores.csv"], config,
                         lambda: _stage_score(cfg))
    if name == "eval":
        return StageSpec("eval", ["corpus.bin", "scores.csv"], ["report.json"],
                         {"report_dir": cfg.report_dir},
                         lambda: _stage_eval(cfg))
    raise ValueError(f"no stage named {name}")


def pipeline_stage_names(cfg: PipelineConfig) -> list[str]:
    names = list(_PIPELINE_ORDER)
    if cfg.baseline in ("ancs", "lof", "smclass"):
        names.remove("pseudo")
        names.remove("train")
    elif cfg.emb_only:
        names.remove("train")
    return names


def run_pipeline(cfg: PipelineConfig) -> detect.EvalReport:
    """All stages in order, skipping the ones the manifest proves current."""
    os.makedirs(cfg.workdir, exist_ok=True)
    manifest = _load_manifest(cfg.workdir)
    manifest["config"] = _normalize(cfg.to_dict())
    for name in pipeline_stage_names(cfg):
        _run_stage(cfg, _spec_for(cfg, name), manifest, resume=True)
    _save_manifest(cfg.workdir, manifest)
    return detect.EvalReport(**detect.read_report(_wp(cfg, "report.json")))


# --- subcommands -----------------------------------------------------------


def _cmd_stage(args: argparse.Namespace, name: str) -> int:
    cfg = build_config(args)
    os.makedirs(cfg.workdir, exist_ok=True)
    manifest = _load_manifest(cfg.workdir)
    manifest["config"] = _normalize(cfg.to_dict())
    _run_stage(cfg, _spec_for(cfg, name), manifest, resume=False)
    _save_manifest(cfg.workdir, manifest)
    return 0


def _cmd_pipeline(args: argparse.Namespace) -> int:
    run_pipeline(build_config(args))
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    gen = synth.GenConfig()
    if args.preset is not None and args.preset != "default":
        raise ConfigError(f"unknown preset {args.preset!r}")
    if args.config:
        table = _load_toml(args.config).get("synth", {})
        if not isinstance(table, dict):
            raise ConfigError(f"{args.config}: [synth] must be a table")
        known = {f.name: f.type for f in dataclasses.fields(synth.GenConfig)}
        for key, value in table.items():
            if key not in known:
                raise ConfigError(f"{args.config}: unknown key {key!r} in [synth]")
            typ = float if isinstance(getattr(gen, key), float) else int
            setattr(gen, key, _coerce(value, typ, f"{args.config}: [synth] {key}"))
    if args.seed is not None:
        gen.seed = args.seed
    gen.validate()
    raws, names = synth.generate(gen)
    os.makedirs(args.out, exist_ok=True)
    corpus_io.write_corpus_jsonl(raws, os.path.join(args.out, "corpus.jsonl"))
    corpus_io.write_scenario_json(names, os.path.join(args.out, "scenario.json"))
    n_out = sum(1 for r in raws if r.gold_label not in names)
    print(f"synth: {len(raws)} documents ({n_out} out-of-category), "
          f"targets {names} -> {args.out}")
    return 0


def _cmd_dump_vectors(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    space = _load_workdir_vectors(cfg)
    embed.save_vectors(space, args.out)
    print(f"dump-vectors: {len(space.word_keys)} words, {len(space.doc_keys)} "
          f"documents, {len(space.cat_keys)} categories -> {args.out}")
    return 0


def _cmd_aggregate(args: argparse.Namespace) -> int:
    if not args.reports:
        raise ConfigError("aggregate needs at least one report file")
    summary = detect.aggregate_reports([detect.read_report(p) for p in args.reports])
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# --- argument parsing ------------------------------------------------------


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}") from None
    if not widths:
        raise argparse.ArgumentTypeError("at least one filter width required")
    return widths


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="TOML", help="config file; flags override it")
    p.add_argument("--workdir", metavar="DIR", help="artifact directory (default .)")
    p.add_argument("--seed", type=int, metavar="N", help="global RNG seed")


def _add_ingest_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", metavar="JSONL", help="one document per line")
    p.add_argument("--scenario", metavar="JSON", help="in-scope category names")
    p.add_argument("--min-freq", type=int, metavar="N",
                   help="drop words seen fewer times (default 5)")


def _add_embed_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, metavar="P")
    p.add_argument("--window", type=int, metavar="W")
    p.add_argument("--negatives", type=int, metavar="N")
    p.add_argument("--margin", type=float, metavar="M")
    p.add_argument("--kappa", type=float, metavar="K")
    p.add_argument("--lr", type=float, metavar="LR")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--workers", type=int, metavar="N",
                   help="training threads; >1 trades determinism for speed")


def _add_pseudo_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--relevance", choices=("direct", "proximity"))
    p.add_argument("--k", type=int, metavar="N", help="document neighbors")
    p.add_argument("--j", type=int, metavar="N", help="words per neighbor")
    p.add_argument("--temperature", type=float, metavar="T")
    p.add_argument("--keep-ratio", type=float, metavar="R",
                   help="keep the R most confident fraction")
    p.add_argument("--tau", type=float, metavar="T",
                   help="keep documents with confidence > T instead")
    p.add_argument("--no-filter", action="store_true",
                   help="train on every document")
    p.add_argument("--temperature-off", action="store_true",
                   help="use temperature 1.0 (soft pseudo-labels)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--filters", type=_parse_widths, metavar="W1,W2,...",
                   help="convolution window widths (default 2,3,4,5)")
    p.add_argument("--maps", type=int, metavar="N", help="feature maps per width")
    p.add_argument("--maxlen", type=int, metavar="L", help="truncate documents")
    p.add_argument("--dropout", type=float, metavar="P", help="keep probability")
    p.add_argument("--clf-lr", type=float, metavar="LR")
    p.add_argument("--clf-epochs", type=int, metavar="N")
    p.add_argument("--refresh-every", type=int, metavar="B",
                   help="batches between self-train target refreshes")
    p.add_argument("--delta", type=float, metavar="D",
                   help="stop when fewer than this fraction change label")
    p.add_argument("--no-self-train", action="store_true",
                   help="stop after pretraining")


def _add_score_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--confidence", choices=("msp", "entropy"))
    p.add_argument("--baseline", choices=("ancs", "lof", "smclass"))
    p.add_argument("--lof-k", type=int, metavar="N")
    p.add_argument("--emb-only", action="store_true",
                   help="rank by embedding confidence, no classifier")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oocd",
        description="Out-of-category document detection under "
                    "category-name-only supervision.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--preset", metavar="NAME", help="named setting (default)")
    p.add_argument("--config", metavar="TOML", help="[synth] section overrides")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, metavar="N")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("ingest", help="tokenize and freeze the corpus")
    _add_common(p)
    _add_ingest_flags(p)
    p.set_defaults(fn=lambda a: _cmd_stage(a, "ingest"))

    p = sub.add_parser("embed", help="train the spherical embedding")
    _add_common(p)
    _add_embed_flags(p)
    p.set_defaults(fn=lambda a: _cmd_stage(a, "embed"))

    p = sub.add_parser("pseudo", help="relevance, pseudo-labels, filtering")
    _add_common(p)
    p.add_argument("--kappa", type=float, metavar="K",
                   help="concentration used when reading vectors")
    _add_pseudo_flags(p)
    p.set_defaults(fn=lambda a: _cmd_stage(a, "pseudo"))

    p = sub.add_parser("train", help="pseudo-label CNN with self-training")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(fn=lambda a: _cmd_stage(a, "train"))

    p = sub.add_parser("score", help="rank documents by confidence")
    _add_common(p)
    p.add_argument("--relevance", choices=("direct", "proximity"),
                   help="names the method tag for emb-only scoring")
    _add_score_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=lambda a: _cmd_stage(a, "score"))

    p = sub.add_parser("eval", help="metrics against gold labels")
    _add_common(p)
    p.add_argument("--report-dir", metavar="DIR",
                   help="also write a seed-suffixed report copy here")
    p.set_defaults(fn=lambda a: _cmd_stage(a, "eval"))

    p = sub.add_parser("pipeline", help="all stages, resuming where possible")
    _add_common(p)
    _add_ingest_flags(p)
    _add_embed_flags(p)
    _add_pseudo_flags(p)
    _add_train_flags(p)
    _add_score_flags(p)
    p.add_argument("--report-dir", metavar="DIR")
    p.set_defaults(fn=_cmd_pipeline)

    p = sub.add_parser("dump-vectors", help="re-serialize trained vectors")
    _add_common(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(fn=_cmd_dump_vectors)

    p = sub.add_parser("aggregate", help="average metrics across reports")
    p.add_argument("reports", nargs="*", metavar="REPORT")
    p.add_argument("--out", metavar="JSON", help="write instead of printing")
    p.set_defaults(fn=_cmd_aggregate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"oocd: config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"oocd: training diverged: {e}", file=sys.stderr)
        return 4
    except DataError as e:
        print(f"oocd: data error: {e}", file=sys.stderr)
        return 3
    except OocdError as e:  # pragma: no cover - future subclasses
        print(f"oocd: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"oocd: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
