"""Exception types shared across the package."""


class FormatError(ValueError):
    """A data file does not follow its declared binary/text layout."""


class ConsistencyError(ValueError):
    """Header counts disagree with each other or with the payload."""


class ShapeError(ValueError):
    """Array length or width does not match the expected layout."""


class UndefinedMetricError(ValueError):
    """A metric was requested on input for which it is not defined."""


class ConfigError(ValueError):
    """Invalid protocol or experiment configuration."""
