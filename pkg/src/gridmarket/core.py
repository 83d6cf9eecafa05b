"""Shared domain types for tree-structured grid dispatch.

Sign and unit conventions used everywhere in this package:

* powers are watts on the grid-side convention, positive meaning power
  drawn from the grid into the device and negative meaning power fed
  back into the grid;
* energies are Wh;
* prices are dimensionless steering signals in [0, 1].

All types in this module are immutable after construction and safe to
share between concurrent tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class StructureError(ValueError):
    """A profile, tree, or result fails a structural requirement."""


class DomainError(ValueError):
    """A numeric value lies outside its permitted domain."""


@dataclass(frozen=True)
class TimeGrid:
    """Horizon discretization: ``T`` slots, each ``tau`` hours long."""

    T: int
    tau: float = 1.0

    def __post_init__(self):
        if not isinstance(self.T, (int, np.integer)) or isinstance(self.T, bool):
            raise StructureError(f"slot count must be an integer, got {self.T!r}")
        if self.T < 1:
            raise StructureError(f"slot count must be >= 1, got {self.T}")
        if not self.tau > 0:
            raise DomainError(f"slot duration must be positive, got {self.tau}")


def as_profile(values, grid: TimeGrid | None = None) -> np.ndarray:
    """Return ``values`` as a read-only float64 vector, length-checked against ``grid``."""
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise StructureError(f"profile must be one-dimensional, got shape {arr.shape}")
    if grid is not None and arr.shape[0] != grid.T:
        raise StructureError(
            f"profile length {arr.shape[0]} does not match the time grid ({grid.T} slots)"
        )
    arr.setflags(write=False)
    return arr


def check_prices(values, grid: TimeGrid | None = None) -> np.ndarray:
    """Validate a price profile: correct length and every value in [0, 1]."""
    arr = as_profile(values, grid)
    if arr.size and (np.min(arr) < 0.0 or np.max(arr) > 1.0):
        raise DomainError("prices must lie in [0, 1]")
    return arr


def zero_profile(grid: TimeGrid) -> np.ndarray:
    return np.zeros(grid.T)


def sum_profiles(profiles, grid: TimeGrid) -> np.ndarray:
    """Element-wise sum of power profiles, accumulated in the given order.

    The accumulation order is the caller's iteration order (a grid tree
    passes its stored child order), which makes repeated runs bitwise
    reproducible. The empty sum is the zero profile.
    """
    out = np.zeros(grid.T)
    for p in profiles:
        p = np.asarray(p, dtype=float)
        if p.shape != (grid.T,):
            raise StructureError(
                f"cannot sum profile of length {p.shape} into a {grid.T}-slot horizon"
            )
        out += p
    return out


# --------------------------------------------------------------------------
# Node kinds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MarketOperator:
    """Root coordinator driving the cluster total toward its target profile."""


@dataclass(frozen=True)
class Congestion:
    """Internal node limiting the power magnitude through one grid component."""

    beta: float  # W, symmetric throughput limit (> 0)

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError(f"congestion limit must be positive, got {self.beta}")


@dataclass(frozen=True, eq=False)
class Load:
    """Non-flexible consumer; its profile is a fixed input to the problem."""

    actual: np.ndarray          # W, the true profile
    historical_avg: np.ndarray  # W, average profile used for forecasting

    def __post_init__(self):
        object.__setattr__(self, "actual", as_profile(self.actual))
        object.__setattr__(self, "historical_avg", as_profile(self.historical_avg))
        if self.actual.shape != self.historical_avg.shape:
            raise StructureError("load profile and historical average differ in length")


@dataclass(frozen=True, eq=False)
class Pv:
    """Solar generator with whole-horizon binary curtailment.

    ``actual`` is grid-side production, so every value must be <= 0.
    ``gamma`` is the operating cost that running the unit must recover
    over the horizon before curtailment becomes the cheaper choice.
    """

    actual: np.ndarray
    historical_avg: np.ndarray
    gamma: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "actual", as_profile(self.actual))
        object.__setattr__(self, "historical_avg", as_profile(self.historical_avg))
        if self.actual.shape != self.historical_avg.shape:
            raise StructureError("PV profile and historical average differ in length")
        if self.actual.size and np.max(self.actual) > 0.0:
            raise DomainError("PV production profile must be nonpositive")
        if self.historical_avg.size and np.max(self.historical_avg) > 0.0:
            raise DomainError("PV historical average must be nonpositive")
        if self.gamma < 0:
            raise DomainError(f"PV operating cost must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class Storage:
    """Buffer device (battery, or heat pump as a charge-only special case).

    A heat pump is a Storage with ``x_min = 0``, ``eta = 1`` and
    ``leakage > 0``: it only charges and loses energy at a constant rate.
    """

    x_min: float        # W, most negative (discharge) power, <= 0
    x_max: float        # W, largest charge power, >= 0
    e_min: float        # Wh
    e_max: float        # Wh
    eta: float          # conversion efficiency in (0, 1]
    leakage: float      # W, constant self-discharge, >= 0
    e0: float           # Wh, energy at the start of the horizon
    ramp_width: float = 0.075  # price width of each linear ramp of the response curve

    def __post_init__(self):
        if not (self.x_min <= 0.0 <= self.x_max):
            raise DomainError("power bounds must satisfy x_min <= 0 <= x_max")
        if self.e_min > self.e_max:
            raise DomainError("energy bounds must satisfy e_min <= e_max")
        if not (self.e_min <= self.e0 <= self.e_max):
            raise DomainError("initial energy must lie within the energy bounds")
        if not (0.0 < self.eta <= 1.0):
            raise DomainError(f"efficiency must be in (0, 1], got {self.eta}")
        if self.leakage < 0:
            raise DomainError(f"leakage must be >= 0, got {self.leakage}")
        if not self.ramp_width > 0:
            raise DomainError(f"ramp width must be positive, got {self.ramp_width}")


DeviceSpec = Load | Pv | Storage
NodeKind = MarketOperator | Congestion | Load | Pv | Storage


def is_device_kind(kind: NodeKind) -> bool:
    return isinstance(kind, (Load, Pv, Storage))


# --------------------------------------------------------------------------
# Grid tree
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridTree:
    """Agent hierarchy: one market operator at the root, congestion nodes
    inside, device leaves. Child order is significant; every reduction over
    children follows it.
    """

    root: str
    children: dict[str, tuple[str, ...]]
    kinds: dict[str, NodeKind]

    def __post_init__(self):
        object.__setattr__(
            self, "children", {k: tuple(v) for k, v in self.children.items()}
        )
        object.__setattr__(self, "kinds", dict(self.kinds))
        self._validate()

    def _validate(self):
        kinds = self.kinds
        if self.root not in kinds:
            raise StructureError(f"root {self.root!r} is not a known node")
        operators = [n for n, k in kinds.items() if isinstance(k, MarketOperator)]
        if operators != [self.root]:
            raise StructureError("the tree must have exactly one market operator, at the root")
        parents: dict[str, str] = {}
        for node, offspring in self.children.items():
            if node not in kinds:
                raise StructureError(f"children listed for unknown node {node!r}")
            for child in offspring:
                if child not in kinds:
                    raise StructureError(f"unknown child node {child!r}")
                if child == self.root:
                    raise StructureError("the root cannot be a child")
                if child in parents:
                    raise StructureError(f"node {child!r} has more than one parent")
                parents[child] = node
        reached = set()
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node in reached:
                raise StructureError(f"cycle through node {node!r}")
            reached.add(node)
            stack.extend(reversed(self.children_of(node)))
        unreachable = set(kinds) - reached
        if unreachable:
            names = ", ".join(sorted(unreachable))
            raise StructureError(f"nodes not reachable from the root: {names}")
        for node, kind in kinds.items():
            has_children = bool(self.children_of(node))
            if is_device_kind(kind) and has_children:
                raise StructureError(f"device node {node!r} must be a leaf")
            if isinstance(kind, Congestion) and not has_children:
                raise StructureError(f"congestion node {node!r} must have at least one child")
        object.__setattr__(self, "_parents", parents)

    def kind_of(self, node: str) -> NodeKind:
        return self.kinds[node]

    def children_of(self, node: str) -> tuple[str, ...]:
        return self.children.get(node, ())

    def parent_of(self, node: str) -> str | None:
        if node == self.root:
            return None
        return self._parents[node]

    @cached_property
    def preorder(self) -> tuple[str, ...]:
        out: list[str] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(self.children_of(node)))
        return tuple(out)

    @cached_property
    def devices(self) -> tuple[str, ...]:
        return tuple(n for n in self.preorder if is_device_kind(self.kinds[n]))

    @cached_property
    def internal_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.preorder if not is_device_kind(self.kinds[n]))

    def subtree_devices(self, node: str) -> tuple[str, ...]:
        out: list[str] = []
        stack = [node]
        while stack:
            n = stack.pop()
            if is_device_kind(self.kinds[n]):
                out.append(n)
            stack.extend(reversed(self.children_of(n)))
        return tuple(out)

    def validate_profile_lengths(self, length: int):
        """Check that every device profile spans exactly ``length`` slots."""
        for node in self.devices:
            kind = self.kinds[node]
            if isinstance(kind, (Load, Pv)) and kind.actual.shape[0] != length:
                raise StructureError(
                    f"device {node!r} has a {kind.actual.shape[0]}-slot profile, "
                    f"expected {length}"
                )


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One constraint breach at contract time."""

    node_id: str
    ptu: int
    magnitude: float  # W, signed excess


@dataclass(eq=False)
class DispatchResult:
    """Outcome of a simulated run: contracts, losses, and diagnostics.

    ``contracted`` maps every node (devices and aggregates) to its
    per-PTU contracted watts. ``feasible`` is true exactly when
    ``violations`` is empty.
    """

    contracted: dict[str, np.ndarray]
    losses: np.ndarray                      # W per simulated PTU
    total_loss_energy: float                # Wh
    feasible: bool
    violations: tuple[Violation, ...]
    iterations_per_step: tuple[int, ...]
    final_prices: tuple[np.ndarray, ...]
    converged_per_step: tuple[bool, ...]
    storage_energy: dict[str, np.ndarray]   # Wh after each committed step
    step_traces: tuple = ()                 # per-step per-node negotiation traces

    @classmethod
    def assemble(cls, *, contracted, losses, tau, violations, iterations_per_step,
                 final_prices, converged_per_step, storage_energy, step_traces=()):
        losses = np.asarray(losses, dtype=float)
        violations = tuple(violations)
        return cls(
            contracted={n: np.asarray(v, dtype=float) for n, v in contracted.items()},
            losses=losses,
            total_loss_energy=float(tau * losses.sum()),
            feasible=not violations,
            violations=violations,
            iterations_per_step=tuple(iterations_per_step),
            final_prices=tuple(final_prices),
            converged_per_step=tuple(converged_per_step),
            storage_energy={n: np.asarray(v, dtype=float) for n, v in storage_energy.items()},
            step_traces=tuple(step_traces),
        )
