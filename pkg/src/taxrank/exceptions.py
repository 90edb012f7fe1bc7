"""Exception hierarchy shared across the harness."""


class TaxRankError(Exception):
    """Base class for all harness errors."""


class ValidationError(TaxRankError, ValueError):
    """Raised when an input object violates its invariants."""


class ScoringError(TaxRankError):
    """Raised when a candidate cannot be scored (e.g. embedding failure)."""


class RenderError(TaxRankError):
    """Raised when a prompt template has unresolved placeholders."""


class ContractError(TaxRankError):
    """Raised when an operation's precondition is violated by its caller."""


class TransportError(TaxRankError):
    """Raised when a remote endpoint cannot be reached or returns garbage."""

    def __init__(self, message, retries=0):
        super().__init__(message)
        self.retries = retries


class InsufficientFixturesError(TaxRankError):
    """Raised when a fixture client has fewer sources than requested."""
