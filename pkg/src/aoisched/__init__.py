"""Age-of-information scheduling for a broadcast base station with Bernoulli arrivals."""

from aoisched.core import (
    ArrivalModel,
    NetworkState,
    RandomSource,
    age_step,
    immediate_cost,
    reference_state,
    sample_arrivals,
)

__version__ = "0.1.0"

__all__ = [
    "ArrivalModel",
    "NetworkState",
    "RandomSource",
    "age_step",
    "immediate_cost",
    "reference_state",
    "sample_arrivals",
]
