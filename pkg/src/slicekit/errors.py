"""Exception types raised across the toolkit.

Everything derives from :class:`SlicekitError` so the CLI can map any
validation failure to exit code 2 with one ``except`` clause.
"""


class SlicekitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SlicekitError, ValueError):
    """Malformed or truncated input file."""


class UnsupportedDatatype(SlicekitError, ValueError):
    pass


class UnsupportedRank(SlicekitError, ValueError):
    pass


class IoError(SlicekitError, OSError):
    pass


class InvalidWindow(SlicekitError, ValueError):
    pass


class DegenerateIntensity(SlicekitError, ValueError):
    pass


class EmptyDataset(SlicekitError, ValueError):
    pass


class EmptyInput(SlicekitError, ValueError):
    pass


class EmptyReport(SlicekitError, ValueError):
    pass


class InvalidSlice(SlicekitError, ValueError):
    pass


class ShapeError(SlicekitError, ValueError):
    pass


class ConfigError(SlicekitError, ValueError):
    pass


class DegenerateVector(SlicekitError, ValueError):
    pass


class UnknownOrgan(SlicekitError, KeyError):
    pass


class MissingPredictions(SlicekitError, KeyError):
    pass


class UndefinedMetric(SlicekitError, ValueError):
    pass
