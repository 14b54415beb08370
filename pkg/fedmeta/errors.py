"""Exception hierarchy shared by every fedmeta module."""

from typing import List, Sequence, Tuple


class FedmetaError(Exception):
    """Base class for all errors raised by fedmeta."""


class LayoutMismatchError(FedmetaError):
    """Two parameter vectors (or a vector and a cache) disagree on layout."""


class ShapeMismatchError(FedmetaError):
    """A tensor does not have the shape an operation requires."""


class NonFiniteError(FedmetaError):
    """NaN or Inf reached an input, a gradient or an updated parameter."""


class LabelError(FedmetaError):
    """Labels are not one-hot rows of the expected width."""


class SpecError(FedmetaError):
    """A network specification cannot be built."""


class DatasetError(FedmetaError):
    """A dataset is empty, inconsistent or cannot serve a request."""


class CorruptHeaderError(DatasetError):
    """A binary container has a bad magic or an impossible header field."""


class TruncatedFileError(DatasetError):
    """A binary container ended before its declared payload."""

    def __init__(self, what: str, missing: int):
        super().__init__(f"truncated {what}: missing {missing} bytes")
        self.what = what
        self.missing = missing


class EpisodeError(FedmetaError):
    """An episode cannot be sampled under the requested constraints."""


class QuorumError(FedmetaError):
    """Fewer than M_min client updates arrived in a round."""


class AttackError(FedmetaError):
    """Invalid backdoor key or attack configuration."""


class DefenseError(FedmetaError):
    """The matching-network defense cannot run on the given episode."""


class ConfigError(FedmetaError):
    """Experiment configuration failed validation."""

    def __init__(self, violations: Sequence[Tuple[str, str]]):
        self.violations: List[Tuple[str, str]] = list(violations)
        summary = "; ".join(f"{path}: {message}" for path, message in self.violations)
        super().__init__(f"invalid configuration: {summary}")
