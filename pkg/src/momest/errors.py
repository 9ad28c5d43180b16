"""Semantic exceptions raised across the package.

Public functions raise these instead of bare ValueError so callers can
distinguish statistical failure modes (moment outside the polytope, channel
too noisy to debias) from plain misuse.
"""

from __future__ import annotations

import numpy as np


class MomestError(Exception):
    """Base class for all package errors."""


class NonIdentifiableError(MomestError):
    """The target moment constrains a direction the feature map cannot express.

    ``direction`` is a unit vector in parameter space along which the centered
    feature map is rank-deficient while the requested moment is nonzero.
    """

    def __init__(self, message: str, direction: np.ndarray | None = None):
        super().__init__(message)
        self.direction = direction


class NotInPolytopeError(MomestError):
    """Moment-matching objective is unbounded: the target lies outside the
    marginal polytope (detected by parameter divergence past a cap)."""


class ConvergenceError(MomestError):
    """An iterative solver exhausted its iteration budget without meeting
    its tolerance."""


class BoundViolationError(MomestError):
    """Feature values violate a stated coordinate bound required by a
    binarizing channel."""


class DegeneratePrivacyError(MomestError):
    """Debiasing is impossible at this privacy level (flip probability 1/2
    makes the bit carry no signal)."""


class InfinitePrivacyError(MomestError):
    """The channel admits outputs that identify the input with certainty, so
    no finite differential-privacy level exists."""


class EnumerationTooLargeError(MomestError):
    """Exhaustive enumeration would exceed the configured term budget."""


class SingularInformationError(MomestError):
    """An information matrix is singular beyond tolerance; the model is not
    identifiable from the given observations."""


class SingularMatrixError(MomestError):
    """A matrix that must be inverted is singular beyond tolerance."""


class SequenceTooShortError(MomestError):
    """A sequence is too short to carry an annotation window."""


class RegionTooLargeError(MomestError):
    """Exact enumeration of label configurations in a region would exceed
    the configured budget."""


class MissingCoordinateError(MomestError):
    """Aggregation saw no observation for some statistic coordinate."""


class MonteCarloTrialError(MomestError):
    """An estimator failed inside a Monte Carlo trial; the trial index is in
    the message and the original failure is chained as ``__cause__``."""
