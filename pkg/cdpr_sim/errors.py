"""Exceptions raised by the CDPR simulator."""

from typing import Optional


class CdprError(Exception):
    """Base class for all simulator errors."""


class InvalidParameters(CdprError, ValueError):
    """Robot parameters violate a physical invariant."""


class DegenerateCable(CdprError):
    """A cable attachment point coincides with its slider anchor."""

    def __init__(self, cable: str, length: float):
        super().__init__(f"cable {cable} is degenerate (free length {length:.3e} m)")
        self.cable = cable
        self.length = length


class NoConvergence(CdprError):
    """Forward kinematics did not reach the gradient tolerance."""


class NumericalDegeneracy(CdprError):
    """An IMM mixing normalizer underflowed."""


class SingularInnovation(CdprError):
    """The innovation covariance of a mode filter is not invertible."""


class AllZeroLikelihood(CdprError):
    """Every mode assigned zero likelihood to the measurement."""


class Infeasible(CdprError):
    """No strictly positive tension vector balances the pulling map."""


class NoFeasibleSliders(CdprError):
    """Every slider configuration on the search grid is wrench infeasible."""


class RecoveryStall(CdprError):
    """The reference stayed pinned longer than the stall limit."""


class NumericalBlowup(CdprError):
    """The plant state left the finite range."""


class MissingColumn(CdprError):
    """A log file lacks a column needed for a plot."""


class ScenarioParseError(CdprError):
    """A scenario document is not valid JSON."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ScenarioValidationError(CdprError):
    """A scenario document violates the schema or a scenario invariant."""

    def __init__(self, message: str, key_path: Optional[str] = None):
        where = f"{key_path}: " if key_path else ""
        super().__init__(f"{where}{message}")
        self.key_path = key_path
