"""
Custom exceptions for the cell-free conjugate beamforming simulator.
"""

from typing import Optional, Sequence


class ConfigError(Exception):
    """Configuration or experiment validation failed."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ScenarioError(Exception):
    """Snapshot generation failed (geometry, shadowing factorization)."""

    pass


class PilotAssignmentError(ScenarioError):
    """Downlink pilots cannot keep a co-pilot group distinct."""

    def __init__(self, message: str, group: Sequence[int]):
        super().__init__(message)
        self.group = tuple(int(k) for k in group)


class PowerConstraintError(Exception):
    """Power coefficients violate the per-AP constraint of their scheme."""

    def __init__(self, message: str, scheme: str, worst_load: float):
        super().__init__(message)
        self.scheme = scheme
        self.worst_load = worst_load


class SolverError(Exception):
    """MMF problem data or bisection is unusable."""

    pass


class OracleFailure(Exception):
    """Monte Carlo estimates disagree with the closed forms."""

    def __init__(self, message: str, failures: Sequence[str] = ()):
        super().__init__(message)
        self.failures = list(failures)


class OutputError(Exception):
    """Result file could not be written."""

    def __init__(self, message: str, path: str):
        super().__init__(message)
        self.path = path


class HaltError(Exception):
    """Fatal error requiring the experiment to stop."""

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason
