"""Receding-horizon simulation: blend forecasts, negotiate, commit, roll.

Every step optimizes a T-slot window whose first slot holds true
values and whose later slots blend toward the historical average. The
negotiated first slot becomes a contract, storage energies advance by
the contracted powers, and the window shifts by one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .coordination import congestion_error, negotiate_root
from .core import (
    Congestion,
    DispatchResult,
    GridTree,
    Load,
    Pv,
    Storage,
    StructureError,
    TimeGrid,
    Violation,
)
from .scenario import Scenario

# Wh of slack before a committed storage energy counts as a bound breach.
ENERGY_TOL = 1e-9


@dataclass
class HorizonState:
    """Mutable carry-over between steps of one simulation run."""

    current_step: int
    storage_energies: dict[str, float]   # Wh, exact (never clamped)
    contracts: dict[str, list[float]]    # append-only, one value per committed step
    window: TimeGrid


def forecast_blend(actual: np.ndarray, historical_avg: np.ndarray,
                   grid: TimeGrid) -> np.ndarray:
    """Blend a window's true values toward the historical average.

    Weight sqrt((t-1)/(T-1)) for 1-based window offset t: the first
    slot is the true value, the last is the plain average. A one-slot
    horizon has no future to be uncertain about and returns the actual
    values.
    """
    actual = np.asarray(actual, dtype=float)
    historical_avg = np.asarray(historical_avg, dtype=float)
    if actual.shape != (grid.T,) or historical_avg.shape != (grid.T,):
        raise StructureError("blend inputs must match the window length")
    if grid.T == 1:
        return np.array(actual)
    alpha = np.sqrt(np.arange(grid.T) / (grid.T - 1))
    return (1.0 - alpha) * actual + alpha * historical_avg


def _wall_slice(profile: np.ndarray, hist: np.ndarray, start: int, length: int) -> np.ndarray:
    """Read ``length`` wall-clock values from ``start``; slots beyond the
    stored profile tile the historical average periodically."""
    stored = profile.shape[0]
    period = hist.shape[0]
    out = np.empty(length)
    for w in range(length):
        m = start + w
        out[w] = profile[m] if m < stored else hist[m % period]
    return out


def _hist_slice(hist: np.ndarray, start: int, length: int) -> np.ndarray:
    period = hist.shape[0]
    idx = (start + np.arange(length)) % period
    return hist[idx]


def theta_slice(scn: Scenario, start: int, length: int) -> np.ndarray:
    """Wall-clock slice of the target profile, tiled periodically."""
    stored = scn.theta.shape[0]
    out = np.empty(length)
    for w in range(length):
        m = start + w
        out[w] = scn.theta[m] if m < stored else scn.theta[m % stored]
    return out


def window_tree(scn: Scenario, start: int, length: int, blend: bool,
                energies: dict[str, float] | None = None) -> GridTree:
    """Build the tree seen by one optimization window.

    Load and PV leaves get the wall-clock slice of their profiles,
    blended toward the historical average unless ``blend`` is false.
    Storage leaves get their live energy as the window's initial state.
    """
    wgrid = TimeGrid(length, scn.grid.tau)
    kinds = {}
    for node, kind in scn.tree.kinds.items():
        if isinstance(kind, (Load, Pv)):
            true_w = _wall_slice(kind.actual, kind.historical_avg, start, length)
            hist_w = _hist_slice(kind.historical_avg, start, length)
            window = forecast_blend(true_w, hist_w, wgrid) if blend else true_w
            if isinstance(kind, Load):
                kinds[node] = Load(actual=window, historical_avg=hist_w)
            else:
                kinds[node] = Pv(actual=window, historical_avg=hist_w, gamma=kind.gamma)
        elif isinstance(kind, Storage) and energies is not None:
            e0 = min(max(energies[node], kind.e_min), kind.e_max)
            kinds[node] = replace(kind, e0=e0)
        else:
            kinds[node] = kind
    return GridTree(root=scn.tree.root, children=scn.tree.children, kinds=kinds)


def advance_energy(spec: Storage, energy: float, power: float, tau: float) -> float:
    """Stored energy after one slot at the contracted grid-side power."""
    eta_p = spec.eta if power >= 0.0 else 1.0 / spec.eta
    return energy + tau * (eta_p * power - spec.leakage)


def run_simulation(scn: Scenario, steps: int | None = None,
                   perfect_forecast: bool = False) -> DispatchResult:
    """Roll the market negotiation over ``steps`` PTUs.

    Each step negotiates a fresh T-slot window from the root, records
    the first slot of every node's program as that node's contract,
    advances storage energies by the contracted powers, and shifts the
    window. Violations are judged on contracted flows only; a step
    whose negotiation did not converge still commits its best-effort
    program so that infeasible instances remain comparable.
    """
    if steps is None:
        steps = scn.steps
    if steps < 1:
        raise StructureError(f"steps must be >= 1, got {steps}")
    tree = scn.tree
    grid = scn.grid
    tau = grid.tau
    eps = scn.solver.epsilon_max

    storages = {
        n: tree.kind_of(n) for n in tree.devices if isinstance(tree.kind_of(n), Storage)
    }
    state = HorizonState(
        current_step=0,
        storage_energies={n: spec.e0 for n, spec in storages.items()},
        contracts={n: [] for n in tree.preorder},
        window=grid,
    )
    losses = []
    violations: list[Violation] = []
    iterations = []
    prices = []
    converged = []
    energy_history: dict[str, list[float]] = {n: [] for n in storages}
    traces = []

    for k in range(steps):
        wtree = window_tree(scn, k, grid.T, blend=not perfect_forecast,
                            energies=state.storage_energies)
        wtheta = theta_slice(scn, k, grid.T)
        outcome, trace = negotiate_root(wtree, wtheta, grid, scn.solver)

        for node in tree.preorder:
            state.contracts[node].append(float(trace[node].program[0]))
        step_loss = 0.0
        for node in tree.devices:
            step_loss += float(trace[node].loss[0])
        losses.append(step_loss)

        residual = float(outcome.residual_error[0])
        if abs(residual) > eps:
            violations.append(Violation(tree.root, k, residual))
        for node in tree.internal_nodes:
            kind = tree.kind_of(node)
            if isinstance(kind, Congestion):
                agg = trace[node].program[0]
                excess = float(congestion_error(np.array([agg]), kind.beta)[0])
                if abs(excess) > eps:
                    violations.append(Violation(node, k, excess))

        for node, spec in storages.items():
            power = state.contracts[node][-1]
            energy = advance_energy(spec, state.storage_energies[node], power, tau)
            if energy < spec.e_min - ENERGY_TOL:
                violations.append(Violation(node, k, (spec.e_min - energy) / tau))
            elif energy > spec.e_max + ENERGY_TOL:
                violations.append(Violation(node, k, (energy - spec.e_max) / tau))
            state.storage_energies[node] = energy
            energy_history[node].append(energy)

        iterations.append(outcome.iterations)
        prices.append(np.array(outcome.local_prices))
        converged.append(outcome.converged)
        traces.append(trace)
        state.current_step = k + 1

    return DispatchResult.assemble(
        contracted=state.contracts,
        losses=losses,
        tau=tau,
        violations=violations,
        iterations_per_step=iterations,
        final_prices=prices,
        converged_per_step=converged,
        storage_energy=energy_history,
        step_traces=traces,
    )
