"""Device-level behavior: how each device type answers a price profile.

Loads ignore prices entirely. PV units make one whole-horizon on/off
decision by comparing the revenue of running against their operating
cost. Storage devices map each slot's price through a monotone
piecewise-linear response curve and then clip the resulting program so
the stored energy never leaves its bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DeviceSpec,
    DomainError,
    Load,
    Pv,
    Storage,
    StructureError,
    TimeGrid,
    check_prices,
)


@dataclass(frozen=True, eq=False)
class DeviceResponse:
    """A device's answer to one price profile."""

    program: np.ndarray   # W per slot
    loss: np.ndarray      # W lost per slot, >= 0
    constraint_ok: bool = True


def load_response(spec: Load, prices: np.ndarray) -> DeviceResponse:
    """A load runs its profile unchanged; prices play no role."""
    program = np.array(spec.actual)
    if program.shape != np.shape(prices):
        raise StructureError("load profile and price profile differ in length")
    return DeviceResponse(program=program, loss=np.zeros_like(program))


def pv_response(spec: Pv, expected: np.ndarray, prices: np.ndarray,
                grid: TimeGrid) -> DeviceResponse:
    """Decide whole-horizon curtailment for a PV unit.

    The unit runs when the horizon revenue of its expected production,
    valued at the offered prices, covers the operating cost; otherwise
    it switches off completely and the forfeited production is booked
    as loss. The decision is one binary for the whole horizon, never a
    partial or per-slot curtailment.
    """
    expected = np.asarray(expected, dtype=float)
    if expected.size and np.max(expected) > 0.0:
        raise DomainError("expected PV production must be nonpositive")
    prices = check_prices(prices, grid)
    revenue = -grid.tau * float(expected @ prices)  # >= 0 because expected <= 0
    if revenue < spec.gamma:
        return DeviceResponse(program=np.zeros(grid.T), loss=-expected)
    return DeviceResponse(program=np.array(expected), loss=np.zeros(grid.T))


def storage_response_curve(spec: Storage, price: float) -> float:
    """Power answered by a storage device to a single price.

    Piecewise linear and monotonically nonincreasing: full charge power
    at low prices, ramping to a zero-power plateau that spans
    [eta/2, 0.5/eta], then ramping down to full discharge power. The
    plateau widens as the efficiency drops, so efficient devices react
    to gentler price moves than inefficient ones.
    """
    if not (0.0 <= price <= 1.0):
        raise DomainError(f"price must lie in [0, 1], got {price}")
    return float(_response_curve(spec, np.array([price]))[0])


def _response_curve(spec: Storage, prices: np.ndarray) -> np.ndarray:
    charge_end = spec.eta / 2.0
    discharge_start = 0.5 / spec.eta
    width = spec.ramp_width
    charging = spec.x_max * np.clip((charge_end - prices) / width, 0.0, 1.0)
    discharging = spec.x_min * np.clip((prices - discharge_start) / width, 0.0, 1.0)
    return np.where(
        prices < charge_end,
        charging,
        np.where(prices > discharge_start, discharging, 0.0),
    )


def _eta_prime(spec: Storage, power) -> np.ndarray:
    # grid-side efficiency factor: eta while charging, 1/eta while discharging
    return np.where(np.asarray(power) >= 0.0, spec.eta, 1.0 / spec.eta)


def storage_energy_trajectory(spec: Storage, program, grid: TimeGrid) -> np.ndarray:
    """Stored energy after each slot of ``program``.

    e[t] = e0 + tau * sum_{t'<=t} (eta'(x[t']) * x[t'] - leakage), where
    eta' is the efficiency while charging and its inverse while
    discharging.
    """
    x = np.asarray(program, dtype=float)
    if x.shape != (grid.T,):
        raise StructureError("program length does not match the time grid")
    deltas = grid.tau * (_eta_prime(spec, x) * x - spec.leakage)
    return spec.e0 + np.cumsum(deltas)


def storage_loss(spec: Storage, program) -> np.ndarray:
    """Per-slot conversion loss of a storage program, always >= 0."""
    x = np.asarray(program, dtype=float)
    return np.where(x >= 0.0, x * (1.0 - spec.eta), x * (1.0 - 1.0 / spec.eta))


def _power_for_energy_delta(spec: Storage, delta: float, tau: float) -> float:
    """Invert the one-slot energy update: the power that changes the stored
    energy by exactly ``delta`` Wh in one slot."""
    rate = delta / tau + spec.leakage
    if rate >= 0.0:
        return rate / spec.eta
    return rate * spec.eta


def storage_response(spec: Storage, prices, grid: TimeGrid) -> DeviceResponse:
    """Price response of a storage device with energy bounds enforced.

    Each slot starts from the response curve, then a single forward
    sweep clips the power to the largest magnitude that keeps the
    running energy inside [e_min, e_max] after that slot (earliest slot
    clipped first). When leakage alone would pull the energy below
    e_min, the device charges at the minimum rate needed instead; if
    even x_max cannot prevent the underflow the response is flagged
    with ``constraint_ok=False``.
    """
    prices = check_prices(prices, grid)
    desired = _response_curve(spec, prices)
    tau = grid.tau
    program = np.empty(grid.T)
    energy = spec.e0
    ok = True
    for t in range(grid.T):
        x = float(desired[t])
        eta_p = spec.eta if x >= 0.0 else 1.0 / spec.eta
        delta = tau * (eta_p * x - spec.leakage)
        if energy + delta > spec.e_max:
            x = _power_for_energy_delta(spec, spec.e_max - energy, tau)
        elif energy + delta < spec.e_min:
            x = _power_for_energy_delta(spec, spec.e_min - energy, tau)
            if x > spec.x_max:
                x = spec.x_max
                ok = False
        eta_p = spec.eta if x >= 0.0 else 1.0 / spec.eta
        energy += tau * (eta_p * x - spec.leakage)
        program[t] = x
    return DeviceResponse(
        program=program, loss=storage_loss(spec, program), constraint_ok=ok
    )


def device_response(spec: DeviceSpec, prices, grid: TimeGrid) -> DeviceResponse:
    """Dispatch to the response of the concrete device type."""
    if isinstance(spec, Load):
        return load_response(spec, prices)
    if isinstance(spec, Pv):
        return pv_response(spec, spec.actual, prices, grid)
    if isinstance(spec, Storage):
        return storage_response(spec, prices, grid)
    raise TypeError(f"not a device spec: {spec!r}")
