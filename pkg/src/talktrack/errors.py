"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4. Everything else is a plain failure.
"""


class TalktrackError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TalktrackError):
    """Invalid configuration value or malformed config file."""


class DataError(TalktrackError):
    """Missing, unreadable, or schema-violating input data."""


class EligibilityError(TalktrackError):
    """Action not eligible for the current customer segment."""


class EpisodeProtocolError(TalktrackError):
    """Environment or session stepped outside its episode protocol."""


class CatalogKeyError(TalktrackError, KeyError):
    """Unknown utterance id in a catalog lookup."""


class OracleSizeError(TalktrackError):
    """Exact-MDP enumeration would exceed the configured state cap."""


class DivergenceError(TalktrackError):
    """Training produced non-finite losses or gradients."""


class FingerprintMismatchError(TalktrackError):
    """Artifact encoder fingerprint does not match the active encoder config."""
