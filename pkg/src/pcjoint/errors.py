"""Exception taxonomy shared across the codec."""


class PcjointError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PcjointError):
    """Malformed input file or container (bad magic, missing fields)."""


class DomainError(PcjointError):
    """Input value outside the documented domain of an operation."""


class ContractError(PcjointError):
    """Mismatched geometry, shapes or channel counts between arguments."""


class CorruptStreamError(PcjointError):
    """Bitstream payload is truncated or internally inconsistent."""


class ModelMismatchError(PcjointError):
    """Bitstream was produced by a different model configuration."""


class TrainingAbort(PcjointError):
    """Training stopped on a non-finite loss; last checkpoint is kept."""
