"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericsError -> 3. Everything raised on purpose inherits from VoxmaeError
so callers can catch library failures without swallowing genuine bugs.
"""


class VoxmaeError(Exception):
    """Base class for all deliberate failures raised by this package."""


class ConfigError(VoxmaeError):
    """Invalid configuration or usage: bad hyperparameters, shapes that
    cannot be assembled into a model, incompatible settings."""


class ContractError(VoxmaeError):
    """An internal call contract was violated (mismatched grids, wrong
    token kind, non-scalar loss). Indicates a caller bug, not bad data."""


class DataError(VoxmaeError):
    """Problem with runtime data: labels out of range, missing splits,
    unlabeled items where labels are required."""


class ParseError(DataError):
    """A file on disk does not conform to its declared format."""


class NumericsError(VoxmaeError):
    """A forward operation produced NaN or Inf."""


class TransferError(ConfigError):
    """Checkpoint weights are incompatible with the target architecture."""
