"""Exception hierarchy for the laboratory.

Every rejected configuration raises; nothing is silently adjusted.  Errors
carry enough context (offending value, admissible range, subinterval) for the
message alone to diagnose the problem.
"""

from __future__ import annotations


class VianaLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VianaLabError):
    """A parameter value or combination is outside the supported range."""


class NoParameterError(VianaLabError):
    """The Misiurewicz parameter search found no admissible root."""


class PeriodicOrbitError(VianaLabError):
    """The postcritical periodic orbit fails a required property."""


class InvarianceError(VianaLabError):
    """An image point or interval escapes the invariant fiber domain."""


class CriticalHitError(VianaLabError):
    """An orbit landed exactly on the critical line and perturbation is off."""


class LemmaViolationError(VianaLabError):
    """A sampled orbit violates a bound that the constants assume."""


class ConstructionError(VianaLabError):
    """The rectangle-partition construction reached an inconsistent state."""


class ConvergenceError(VianaLabError):
    """An iterative solver failed to reach its tolerance."""


class DependencyError(VianaLabError):
    """A CLI subcommand needs an artifact another subcommand produces first."""
