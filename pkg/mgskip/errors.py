"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations

from typing import Any


class MGSkipError(Exception):
    """Base class for every error raised by mgskip."""


class InvalidSizeError(MGSkipError, ValueError):
    """A graph or array size is outside the supported range."""


class ConnectivityError(MGSkipError):
    """The graph is not connected."""


class InfeasibleConnectivityError(ConnectivityError, ValueError):
    """The requested edge budget cannot produce a connected graph."""


class DomainError(MGSkipError, ValueError):
    """A scalar argument lies outside its mathematical domain."""


class ShapeError(MGSkipError, ValueError):
    """Stacked node states do not match the network size."""


class ParameterError(MGSkipError, ValueError):
    """Invalid model or algorithm parameter."""


class DataParseError(MGSkipError, ValueError):
    """A data file line could not be parsed."""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyDataError(MGSkipError, ValueError):
    """A data file holds no samples."""


class NonConvergenceError(MGSkipError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, best_iterate: Any, residual: float) -> None:
        super().__init__(message)
        self.best_iterate = best_iterate
        self.residual = residual


class DivergenceError(MGSkipError):
    """Iterates became non-finite."""

    def __init__(self, message: str, trace: list | None = None) -> None:
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ConsistencyError(MGSkipError):
    """An internal invariant does not hold (implementation bug or bad operator)."""


class ConditionError(MGSkipError, ValueError):
    """PUDA matrices violate the convergence condition."""


class ConfigError(MGSkipError, ValueError):
    """Experiment configuration is malformed or incomplete."""


class RunError(MGSkipError):
    """A single (algorithm, seed) run failed."""

    def __init__(self, algorithm: str, seed: int, cause: BaseException) -> None:
        super().__init__(f"run {algorithm!r} seed={seed} failed: {cause}")
        self.algorithm = algorithm
        self.seed = seed
        self.cause = cause
