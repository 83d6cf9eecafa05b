import numpy as np
import pytest

from gridmarket import (
    Congestion,
    GridTree,
    Load,
    MarketOperator,
    NegotiationParams,
    Pv,
    Storage,
    TimeGrid,
)


def make_storage(**overrides) -> Storage:
    spec = dict(
        x_min=-100.0,
        x_max=200.0,
        e_min=0.0,
        e_max=1_000_000.0,
        eta=0.9,
        leakage=0.0,
        e0=500_000.0,
        ramp_width=0.075,
    )
    spec.update(overrides)
    return Storage(**spec)


def mo_over(devices: dict) -> GridTree:
    """A market operator directly over the given devices."""
    kinds = {"mo": MarketOperator(), **devices}
    return GridTree(root="mo", children={"mo": tuple(devices)}, kinds=kinds)


@pytest.fixture
def grid24() -> TimeGrid:
    return TimeGrid(24)


@pytest.fixture
def params() -> NegotiationParams:
    return NegotiationParams()
