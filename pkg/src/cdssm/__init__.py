"""Continuous-discrete state-space models with closed-form controlled latent dynamics."""

from ._accel import backend, set_workers
from .rng import RandomStream
from .types import (
    GaussianState,
    ObservationSeq,
    PiecewiseControl,
    SpdOperator,
    TimeGrid,
    cov_from_eigenbasis,
    cov_to_eigenbasis,
    from_eigenbasis,
    make_spd,
    to_eigenbasis,
)

__version__ = "0.1.0"

__all__ = [
    "GaussianState",
    "ObservationSeq",
    "PiecewiseControl",
    "RandomStream",
    "SpdOperator",
    "TimeGrid",
    "backend",
    "cov_from_eigenbasis",
    "cov_to_eigenbasis",
    "from_eigenbasis",
    "make_spd",
    "set_workers",
    "to_eigenbasis",
]
