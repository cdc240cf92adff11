"""Shared exception types.

Every failure surfaced by the library maps to one of these classes so the
CLI can translate them into stable exit codes (see cli.EXIT_*).
"""


class RecommenderError(Exception):
    """Base class for all library errors."""

    #: default CLI exit code for this error family
    exit_code = 2

    def __init__(self, message: str, *, artifact: bool = False):
        super().__init__(message)
        #: True when the error concerns a binary artifact (graph, checkpoint,
        #: feature file) rather than user input; the CLI exits 3 for those.
        self.artifact = artifact


class ShapeError(RecommenderError):
    """Operand shapes do not conform to an operation's rule."""


class NumericsError(RecommenderError):
    """A non-finite value appeared where finite numbers are required."""

    exit_code = 4


class ContractError(RecommenderError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(RecommenderError):
    """A configuration value is outside its legal range."""


class FormatError(RecommenderError):
    """A file's syntax or header does not match the expected format."""


class EmptyDataError(RecommenderError):
    """An operation produced or received an empty dataset."""


class SplitError(RecommenderError):
    """A user cannot be split into train/valid/test under the split rule."""
