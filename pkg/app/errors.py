"""
Exception hierarchy shared by the library, the jobs and the CLI.
Every class carries the process exit code the CLI maps it to.
"""

from typing import Optional


class SopLabError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 3


class ConfigError(SopLabError):
    """Invalid configuration, usage or mode/data combination."""

    exit_code = 2


class SpecError(ConfigError):
    """Synthetic dataset spec that cannot be realized (e.g. grid too small)."""


class DimensionError(SopLabError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class ChecksumError(SopLabError):
    """On-disk artifact does not match its manifest."""

    exit_code = 2


class ContractError(SopLabError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(SopLabError, FloatingPointError):
    """NaN or Inf produced by a forward op or a function evaluation."""


class NotPSDError(SopLabError):
    """Matrix has a materially negative eigenvalue."""


class ConvergenceError(SopLabError):
    """Iterative solver hit its iteration cap."""


class DegenerateCovariance(SopLabError):
    """Covariance with (near) zero trace or norm; cannot be pre-normalized."""

    def __init__(
        self,
        message: str,
        sample_index: Optional[int] = None,
        sample_id: Optional[int] = None,
    ):
        super().__init__(message)
        self.sample_index = sample_index
        self.sample_id = sample_id

    def with_sample_id(self, sample_id: int) -> "DegenerateCovariance":
        return DegenerateCovariance(
            f"{self.args[0]} (sample id {sample_id})",
            sample_index=self.sample_index,
            sample_id=sample_id,
        )
