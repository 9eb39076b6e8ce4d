"""Exception hierarchy shared by the library and the command line.

Each error class carries the process exit code the CLI reports for it.
"""

from __future__ import annotations

from typing import Optional


class GroundFailError(Exception):
    """Base class for every failure the pipeline reports to the user."""

    exit_code = 1


class ConfigError(GroundFailError):
    exit_code = 2


class InputIOError(GroundFailError):
    exit_code = 3


class RasterFormatError(InputIOError):
    """Malformed ASCII grid. Carries the 1-based line and column."""

    def __init__(self, message: str, path: str, line: int, column: Optional[int] = None):
        where = f"{path}:{line}" if column is None else f"{path}:{line}:{column}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.column = column


class GridMismatchError(InputIOError, ValueError):
    """Rasters that must share a grid do not, or extents are disjoint."""


class NumericalError(GroundFailError):
    exit_code = 4


class NonFiniteBoundError(NumericalError):
    def __init__(self, cell_index, weights):
        super().__init__(
            f"variational bound became non-finite at cell {cell_index} "
            f"with weights {weights}"
        )
        self.cell_index = cell_index
        self.weights = weights


class EmptyDatasetError(NumericalError):
    pass


class DomainError(ValueError):
    """A pure operation was called outside its domain."""

    exit_code = 4
