"""
Exception hierarchy shared by the library, the CLI and the HTTP service.
"""
from typing import Optional


class BatleError(Exception):
    """Base class for every error raised on purpose by this package."""

    code = "error"


class ConfigError(BatleError):
    code = "config"


class DataFormatError(BatleError):
    """A file on disk does not match its documented format."""

    code = "data_format"


class DatasetError(BatleError):
    """A dataset violates a domain invariant (labels, domains, splits)."""

    code = "dataset"


class MaskedLabelError(DatasetError):
    """A treatment/outcome was read from a source-domain row."""

    code = "masked_label"


class RankDeficiencyError(BatleError):
    code = "rank"

    def __init__(self, rank: int, requested: int):
        self.rank = rank
        self.requested = requested
        super().__init__(f"data has numerical rank {rank}, fewer than the {requested} requested components")


class ShapeError(BatleError):
    code = "shape"


class NonFiniteActivationError(BatleError):
    code = "non_finite_activation"

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"non-finite activation in layer {layer}")


class TrainingDivergedError(BatleError):
    code = "diverged"

    def __init__(self, epoch: int, detail: Optional[str] = None):
        self.epoch = epoch
        message = f"training diverged at epoch {epoch}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class FetchError(BatleError):
    code = "fetch"
