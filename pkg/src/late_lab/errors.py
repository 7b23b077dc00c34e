"""Exception hierarchy shared across the package.

Every contract violation raised by ``late_lab`` derives from
:class:`LateLabError`, so callers (the CLI, the simulation loop, the
bootstrap) can separate data/contract problems from programming errors.
"""

from __future__ import annotations


class LateLabError(Exception):
    """Base class for all data and contract errors."""


class DataError(LateLabError, ValueError):
    """Input data violates the observed-data model."""


class MissingColumn(DataError):
    pass


class NonBinaryIndicator(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class EmptyInstrumentArm(DataError):
    pass


class ZeroVariancePair(DataError):
    pass


class DegenerateNull(DataError):
    pass


class EstimationError(LateLabError):
    """A numerical routine could not produce a usable result."""


class RankDeficientDesign(EstimationError):
    pass


class SingularWeighting(EstimationError):
    pass


class NonFiniteObjective(EstimationError):
    pass


class EmptyNeighborhood(EstimationError):
    pass


class AllCandidatesDegenerate(EstimationError):
    pass


class ZeroVarianceCovariate(EstimationError):
    pass


class InsufficientData(EstimationError):
    pass


class WeakFirstStage(EstimationError):
    pass


class AllTrimmed(EstimationError):
    pass


class TooManyFailures(EstimationError):
    pass


class InsufficientDonors(EstimationError):
    pass


class NoCompliers(EstimationError):
    pass


class ConfigError(LateLabError):
    """A run configuration is missing a key or holds an invalid value."""


class SeparationWarning(RuntimeWarning):
    """Binary-response likelihood keeps improving while coefficients diverge."""
