"""Exception hierarchy shared by every module of the project."""
from typing import Iterable, Optional


class PTSegError(Exception):
    """Base class for all errors raised by the library."""


class ConfigError(PTSegError):
    """Invalid or inconsistent experiment configuration."""


class ShapeError(PTSegError, ValueError):
    """Arrays whose shapes do not agree with the operation contract."""


class VocabularyError(PTSegError, KeyError):
    """Prompt words missing from the frozen text-encoder vocabulary."""

    def __init__(self, words: Iterable[str]):
        self.words = sorted(set(words))
        super().__init__(f"out-of-vocabulary word(s): {', '.join(self.words)}")

    def __str__(self) -> str:
        return self.args[0]


class FrozenParameterError(PTSegError):
    """A parameter group changed after it was frozen."""


class TrainingDivergedError(PTSegError):
    """A loss became NaN or infinite."""

    def __init__(self, step: int, components: Optional[dict] = None):
        self.step = step
        self.components = components or {}
        detail = ", ".join(f"{k}={v}" for k, v in sorted(self.components.items()))
        super().__init__(f"non-finite loss at step {step}" + (f" ({detail})" if detail else ""))


class LayoutError(PTSegError):
    """A synthetic scene layout could not place every requested object."""


class DatasetError(PTSegError):
    """Dataset specification, manifest or on-disk content is unusable."""


class CheckpointError(PTSegError):
    """A checkpoint container is malformed or fails its integrity check."""


class MissingArtifactsError(PTSegError):
    """Run directories lack the artifacts an operation needs."""

    def __init__(self, missing: Iterable[str]):
        self.missing = list(missing)
        listing = "\n  ".join(self.missing)
        super().__init__(f"missing artifacts:\n  {listing}")


class RunDirectoryError(PTSegError):
    """A run directory already holds results and neither resume nor force was requested."""
