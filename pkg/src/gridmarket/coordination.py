"""Recursive price negotiation over the grid tree.

Price profiles travel down the tree, power programs travel back up.
Every internal node (market operator or congestion node) repeatedly
requests programs from its children, measures its constraint error per
slot, and moves the prices of the violated slots toward the projected
zero crossing of the error, until the error is within tolerance or the
iteration budget runs out. Slots that were never violated keep the
parent's price untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import device_response
from .core import (
    Congestion,
    GridTree,
    MarketOperator,
    StructureError,
    TimeGrid,
    is_device_kind,
    sum_profiles,
)


@dataclass(frozen=True)
class NegotiationParams:
    """Tuning of the price search, shared by every node of one run."""

    epsilon_max: float = 1e-3   # W, per-slot convergence tolerance
    max_iters: int = 1000       # evaluation budget per node per step
    probe_step: float = 0.1     # first price move when no slope is known yet

    def __post_init__(self):
        if self.epsilon_max <= 0 or self.max_iters < 1 or self.probe_step <= 0:
            raise StructureError(f"invalid negotiation parameters: {self}")


class PriceSearchState:
    """Per-slot history of (price, error) evaluations, most recent last."""

    def __init__(self, T: int, params: NegotiationParams):
        self.params = params
        self.history: list[list[tuple[float, float]]] = [[] for _ in range(T)]
        self.iterations = [0] * T

    def record(self, prices: np.ndarray, errors: np.ndarray):
        for t, (p, e) in enumerate(zip(prices, errors)):
            self.history[t].append((float(p), float(e)))
            self.iterations[t] += 1


def adjust_prices(state: PriceSearchState, errors: np.ndarray) -> np.ndarray:
    """Propose the next price profile from the evaluation history.

    Per slot, independently: a converged slot keeps its price. With a
    single evaluated point the price probes one step in the direction
    that opposes the error (over-consumption raises the price). With
    two points the secant through them projects the error's zero
    crossing; a flat or degenerate secant falls back to a probe step.
    All prices are clamped to [0, 1].
    """
    eps = state.params.epsilon_max
    probe = state.params.probe_step
    out = np.empty(len(state.history))
    for t, hist in enumerate(state.history):
        if not hist:
            raise StructureError("adjust_prices called before any evaluation")
        price, _ = hist[-1]
        err = float(errors[t])
        if abs(err) <= eps:
            out[t] = price
            continue
        if len(hist) >= 2:
            (p0, e0), (p1, e1) = hist[-2], hist[-1]
            if e1 != e0 and p1 != p0:
                candidate = min(1.0, max(0.0, p1 - e1 * (p1 - p0) / (e1 - e0)))
                if candidate != price:
                    out[t] = candidate
                    continue
                # clamping swallowed the whole step (degenerate slope at a
                # price boundary); treat it like a flat secant
        out[t] = min(1.0, max(0.0, price + probe * np.sign(err)))
    return out


def target_error(aggregate: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Market-operator constraint error: aggregate minus target, per slot."""
    aggregate = np.asarray(aggregate, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if aggregate.shape != theta.shape:
        raise StructureError("aggregate and target profiles differ in length")
    return aggregate - theta


def congestion_error(aggregate: np.ndarray, beta: float) -> np.ndarray:
    """Signed congestion excess per slot, zero inside the band [-beta, beta].

    For overloads the error keeps the sign of the flow, so consumption
    overloads push prices up and production overloads pull them down.
    """
    if not beta > 0:
        raise StructureError(f"congestion limit must be positive, got {beta}")
    aggregate = np.asarray(aggregate, dtype=float)
    excess = np.abs(aggregate) - beta
    return np.where(excess > 0.0, np.sign(aggregate) * excess, 0.0)


@dataclass(frozen=True, eq=False)
class NegotiationOutcome:
    """Result of one node's negotiation: its aggregate program and the
    local prices it settled on."""

    program: np.ndarray
    local_prices: np.ndarray
    converged: bool
    iterations: int
    residual_error: np.ndarray


@dataclass(frozen=True, eq=False)
class NodeTrace:
    """Diagnostic snapshot of a node's most recent evaluation."""

    program: np.ndarray
    local_prices: np.ndarray
    converged: bool
    iterations: int
    violated_slots: frozenset[int]
    loss: np.ndarray | None = None  # device nodes only


def negotiate(node: str, prices: np.ndarray | None, tree: GridTree, grid: TimeGrid,
              params: NegotiationParams, theta: np.ndarray | None = None,
              trace: dict[str, NodeTrace] | None = None) -> NegotiationOutcome:
    """Create a power program for ``node`` given its parent's prices.

    Device nodes run their local optimization once. Internal nodes loop:
    request child programs, aggregate in child order, measure the
    constraint error (against ``theta`` at the market operator, against
    the throughput limit at congestion nodes), and adjust the prices of
    violated slots. The market operator ignores the passed prices and
    starts from 0.5 everywhere.

    Identical inputs produce identical outcomes. When the budget runs
    out, or the price search reaches a fixed point it cannot leave, the
    outcome carries ``converged=False`` and the last evaluated program.
    """
    kind = tree.kind_of(node)

    if is_device_kind(kind):
        if prices is None:
            raise StructureError("device negotiation needs a price profile")
        response = device_response(kind, prices, grid)
        outcome = NegotiationOutcome(
            program=response.program,
            local_prices=np.array(prices),
            converged=True,
            iterations=1,
            residual_error=np.zeros(grid.T),
        )
        if trace is not None:
            trace[node] = NodeTrace(
                program=response.program,
                local_prices=outcome.local_prices,
                converged=response.constraint_ok,
                iterations=1,
                violated_slots=frozenset(),
                loss=response.loss,
            )
        return outcome

    if isinstance(kind, MarketOperator):
        if theta is None:
            raise StructureError("market operator negotiation needs a target profile")
        if np.shape(theta) != (grid.T,):
            raise StructureError("target profile length does not match the time grid")
        local = np.full(grid.T, 0.5)
    else:
        if prices is None:
            raise StructureError("congestion negotiation needs the parent's prices")
        local = np.array(prices, dtype=float)

    state = PriceSearchState(grid.T, params)
    violated: set[int] = set()
    iterations = 0
    converged = False
    aggregate = np.zeros(grid.T)
    errors = np.zeros(grid.T)
    while iterations < params.max_iters:
        iterations += 1
        programs = [
            negotiate(child, local, tree, grid, params, theta=None, trace=trace).program
            for child in tree.children_of(node)
        ]
        aggregate = sum_profiles(programs, grid)
        if isinstance(kind, MarketOperator):
            errors = target_error(aggregate, theta)
        else:
            errors = congestion_error(aggregate, kind.beta)
        state.record(local, errors)
        bad = np.abs(errors) > params.epsilon_max
        violated.update(int(t) for t in np.nonzero(bad)[0])
        if not bad.any():
            converged = True
            break
        if iterations >= params.max_iters:
            break
        proposal = adjust_prices(state, errors)
        if np.array_equal(proposal, local):
            # no price can move any further; looping again would repeat
            # the exact same evaluation forever
            break
        local = proposal

    outcome = NegotiationOutcome(
        program=aggregate,
        local_prices=local,
        converged=converged,
        iterations=iterations,
        residual_error=errors,
    )
    if trace is not None:
        trace[node] = NodeTrace(
            program=aggregate,
            local_prices=np.array(local),
            converged=converged,
            iterations=iterations,
            violated_slots=frozenset(violated),
        )
    return outcome


def negotiate_root(tree: GridTree, theta: np.ndarray, grid: TimeGrid,
                   params: NegotiationParams):
    """Run one full negotiation from the market operator down.

    Returns the root outcome and a trace mapping every node to the
    snapshot of its final evaluation.
    """
    trace: dict[str, NodeTrace] = {}
    outcome = negotiate(tree.root, None, tree, grid, params, theta=theta, trace=trace)
    return outcome, trace
