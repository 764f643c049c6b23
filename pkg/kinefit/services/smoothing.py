"""
1-euro filter: an adaptive first-order low-pass whose cutoff rises with the
signal speed, used on the detector output before fitting.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from kinefit.exceptions import InvalidInputError, InvalidTimestampError
from kinefit.services.energy import FramePrediction, renormalize_relative

logger = logging.getLogger(__name__)


class OneEuroParams(BaseModel):
    min_cutoff: float = Field(1.0, gt=0)
    beta: float = Field(0.5, ge=0)
    d_cutoff: float = Field(1.0, gt=0)

    model_config = {"frozen": True}


class FilterConfig(OneEuroParams):
    """Filter parameters plus the switches choosing which predictions are filtered."""
    filter_2d: bool = True
    filter_3d: bool = True


@dataclass(frozen=True, eq=False)
class OneEuroState:
    params: OneEuroParams
    value: Optional[np.ndarray] = None
    derivative: Optional[np.ndarray] = None
    timestamp: Optional[float] = None


def smoothing_factor(dt: float, cutoff) -> np.ndarray:
    r = 2.0 * np.pi * cutoff * dt
    return r / (r + 1.0)


def one_euro_step(state: OneEuroState, sample: np.ndarray, t: float) -> Tuple[np.ndarray, OneEuroState]:
    """
    Filter one sample of an n-channel signal.

    The first call returns the sample unchanged and initializes the state.

    Raises:
        InvalidTimestampError: If t does not increase.
    """
    sample = np.asarray(sample, dtype=float)
    if state.timestamp is None:
        return sample.copy(), replace(state, value=sample.copy(), derivative=np.zeros_like(sample), timestamp=float(t))
    if sample.shape != state.value.shape:
        raise InvalidInputError(f"sample shape {sample.shape} does not match filter shape {state.value.shape}")
    dt = float(t) - state.timestamp
    if not dt > 0:
        raise InvalidTimestampError(f"timestamp {t} does not follow {state.timestamp}")

    params = state.params
    derivative = (sample - state.value) / dt
    a_d = smoothing_factor(dt, params.d_cutoff)
    derivative = a_d * derivative + (1.0 - a_d) * state.derivative

    cutoff = params.min_cutoff + params.beta * np.abs(derivative)
    a = smoothing_factor(dt, cutoff)
    value = a * sample + (1.0 - a) * state.value
    return value.copy(), OneEuroState(params=params, value=value, derivative=derivative, timestamp=float(t))


class OneEuroFilter:
    """Stateful wrapper around `one_euro_step` for a single stream."""

    def __init__(self, params: Optional[OneEuroParams] = None):
        self.state = OneEuroState(params=params or OneEuroParams())

    def __call__(self, sample: np.ndarray, t: float) -> np.ndarray:
        filtered, self.state = one_euro_step(self.state, sample, t)
        return filtered

    def reset(self) -> None:
        self.state = OneEuroState(params=self.state.params)


class PredictionFilter:
    """Applies 1-euro filters to the 2D maxima and the relative 3D predictions of a stream."""

    def __init__(self, config: Optional[FilterConfig] = None):
        self.config = config or FilterConfig()
        params = OneEuroParams(
            min_cutoff=self.config.min_cutoff,
            beta=self.config.beta,
            d_cutoff=self.config.d_cutoff,
        )
        self.filter_2d = OneEuroFilter(params)
        self.filter_3d = OneEuroFilter(params)

    def __call__(self, pred: FramePrediction, t: float) -> FramePrediction:
        u, x = pred.u, pred.x
        if self.config.filter_2d:
            u = self.filter_2d(u, t)
        if self.config.filter_3d:
            x = renormalize_relative(self.filter_3d(x, t))
        return FramePrediction(u=u, omega=pred.omega, x=x)
