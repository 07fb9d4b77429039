"""Exception hierarchy used across the pipeline.

Three broad categories, which the CLI maps onto exit codes:

* ConfigError       -> exit 2 (bad option values or combinations)
* DataError         -> exit 3 (bad input data or on-disk artifacts)
* TrainingDiverged  -> exit 4 (loss went non-finite)
"""


class OocdError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(OocdError):
    pass


class DataError(OocdError):
    pass


class TrainingDiverged(OocdError):
    pass


# --- data errors -----------------------------------------------------------


class EmptyCorpus(DataError):
    """Every document came out empty after tokenization and vocab filtering."""


class NameNotInVocabulary(DataError):
    def __init__(self, name: str):
        super().__init__(
            f"category name {name!r} does not tokenize to a vocabulary word"
        )
        self.name = name


class MultiTokenName(DataError):
    def __init__(self, name: str, tokens: list[str]):
        super().__init__(
            f"category name {name!r} tokenizes to {len(tokens)} words {tokens}; "
            "single-word names only"
        )
        self.name = name
        self.tokens = tokens


class DuplicateCategoryToken(DataError):
    def __init__(self, token: str):
        super().__init__(f"two category names resolve to the same token {token!r}")
        self.token = token


class EmptyConfidentSet(DataError):
    """Confidence filtering kept no documents."""


class EmptyInput(DataError):
    """A classifier forward pass was asked to score a document with no tokens."""


class UndefinedMetric(DataError):
    """A score or metric is undefined for this input (e.g. only one class present)."""


class CategoryUncovered(DataError):
    def __init__(self, name: str):
        super().__init__(
            f"no document mentions exactly the category name {name!r}; "
            "the name-matching baseline has no training data for it"
        )
        self.name = name


class MissingArtifact(DataError):
    def __init__(self, path: str, stage: str):
        super().__init__(f"missing {path}; run the {stage!r} stage first")
        self.path = path
        self.stage = stage


class StaleArtifact(DataError):
    def __init__(self, path: str, detail: str = ""):
        msg = f"{path} does not match the manifest"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.path = path
