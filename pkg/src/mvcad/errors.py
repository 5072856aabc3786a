"""Typed errors shared across the package."""


class MvcadError(Exception):
    """Base class for all package errors."""


class ParseError(MvcadError):
    """Malformed file content; message carries file name and line number."""


class ValidationError(MvcadError):
    """A value violates a documented invariant; message names the field."""


class DanglingReferenceError(MvcadError):
    """A record references a frame index or model id that does not exist."""


class NonPositiveDepthError(MvcadError):
    """Projection or backprojection requested at camera depth <= 0."""


class AllVerticesBehindCameraError(MvcadError):
    """Too few vertices in front of the near plane to form a projected box."""


class MissingScalePredictionError(MvcadError):
    """Scale-from-recognition term evaluated on an observation without one."""


class NoObservationsError(MvcadError):
    """A solve was requested for an object with no observations."""


class NonFiniteObjectiveError(MvcadError):
    """The objective or its gradient became non-finite; input data is bad."""


class DivergentDepthError(MvcadError):
    """Single-frame depth search found no interior minimum in [0.1, 100] m."""


class InfeasibleSpecError(MvcadError):
    """A synthetic scene spec cannot be realized (e.g. object never visible)."""


class NoVotesError(MvcadError):
    """CAD model voting requested but no observation carries a vote."""


class DimensionMismatchError(MvcadError):
    """Embedding dimensions disagree between query and database."""


class UnknownFieldWarning(UserWarning):
    """A record carried an unrecognized top-level field (forward compat)."""
