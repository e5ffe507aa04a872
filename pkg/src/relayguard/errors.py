"""Exception hierarchy shared by all relayguard modules."""


class RelayGuardError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RelayGuardError, ValueError):
    """Invalid configuration or precondition on parameters."""


class RangeError(RelayGuardError, ValueError):
    """A time or index falls outside the span of a trace."""


class DataError(RelayGuardError, ValueError):
    """Malformed, inconsistent or leaking data."""


class RecordError(DataError):
    """A single record of an input file failed validation.

    ``line`` is 1-based, ``reason`` one of ``"shape"``, ``"label"``,
    ``"non-finite"`` or ``"parse"``.
    """

    def __init__(self, line: int, reason: str, detail: str):
        self.line = line
        self.reason = reason
        self.detail = detail
        super().__init__(f"record {line}: {reason} error: {detail}")


class CapabilityError(RelayGuardError, RuntimeError):
    """A model or tokenizer asset lacks a required capability."""


class ContractError(CapabilityError):
    """Tokenizer contract of a sample does not match the model bundle."""


class TokenBudgetError(DataError):
    """One or more prompts exceed the token budget."""

    def __init__(self, offenders: list, budget: int):
        self.offenders = offenders
        self.budget = budget
        super().__init__(
            f"{len(offenders)} prompt(s) exceed {budget} tokens; first: {offenders[:5]}"
        )
