"""Package exception types."""


class GaceError(Exception):
    """Base class for data and configuration errors raised by this package."""


class DataFormatError(GaceError):
    """A dataset, model or cache file is malformed or inconsistent."""
