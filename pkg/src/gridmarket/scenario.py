"""Scenario construction: topology, profiles, targets, and file formats.

A scenario bundles a grid tree whose device leaves carry full-length
(wall-clock) profiles, the target profile, the negotiation parameters,
a seed, and the number of steps to simulate. Scenarios are built either
from a JSON file, from a profile CSV plus explicit topology, or from
the seeded synthetic generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .coordination import NegotiationParams
from .core import (
    Congestion,
    GridTree,
    Load,
    MarketOperator,
    NodeKind,
    Pv,
    Storage,
    StructureError,
    TimeGrid,
    as_profile,
)


class ScenarioError(ValueError):
    """A scenario file, profile file, or parameter set is invalid."""


@dataclass(frozen=True, eq=False)
class Scenario:
    """A complete, resolved problem instance."""

    grid: TimeGrid            # horizon window used by every negotiation step
    tree: GridTree            # devices carry full-length wall-clock profiles
    theta: np.ndarray         # W, wall-clock target profile
    solver: NegotiationParams
    seed: int
    steps: int

    def __post_init__(self):
        object.__setattr__(self, "theta", as_profile(self.theta))
        if self.steps < 1:
            raise ScenarioError(f"steps must be >= 1, got {self.steps}")
        length = self.profile_length
        self.tree.validate_profile_lengths(length)
        if self.theta.shape[0] != length:
            raise ScenarioError(
                f"target profile length {self.theta.shape[0]} does not match "
                f"the device profiles ({length})"
            )

    @property
    def profile_length(self) -> int:
        for node in self.tree.devices:
            kind = self.tree.kind_of(node)
            if isinstance(kind, (Load, Pv)):
                return kind.actual.shape[0]
        return self.theta.shape[0] if self.theta.size else self.grid.T

    def storage_nodes(self) -> tuple[str, ...]:
        return tuple(
            n for n in self.tree.devices if isinstance(self.tree.kind_of(n), Storage)
        )


@dataclass(frozen=True, eq=False)
class ProfileLibrary:
    """Named load and PV profiles plus their per-slot historical averages."""

    loads: dict[str, np.ndarray]
    pvs: dict[str, np.ndarray]

    def __post_init__(self):
        lengths = {v.shape[0] for v in self.loads.values()}
        lengths |= {v.shape[0] for v in self.pvs.values()}
        if len(lengths) > 1:
            raise ScenarioError(f"profiles differ in length: {sorted(lengths)}")
        if not lengths:
            raise ScenarioError("no profiles")
        for name, values in self.pvs.items():
            if values.size and np.max(values) > 0.0:
                raise ScenarioError(f"PV profile {name!r} has positive values")

    @property
    def length(self) -> int:
        profiles = list(self.loads.values()) or list(self.pvs.values())
        return profiles[0].shape[0]

    @property
    def load_avg(self) -> np.ndarray:
        return _mean_profile(list(self.loads.values()), self.length)

    @property
    def pv_avg(self) -> np.ndarray:
        return _mean_profile(list(self.pvs.values()), self.length)


def _mean_profile(profiles: list[np.ndarray], length: int) -> np.ndarray:
    if not profiles:
        return np.zeros(length)
    total = np.zeros(length)
    for p in profiles:
        total += p
    return total / len(profiles)


# --------------------------------------------------------------------------
# Profile CSV ingestion
# --------------------------------------------------------------------------

_CSV_HEADER = "profile_id,kind,slot,watts"


def load_profile_csv(path) -> ProfileLibrary:
    """Parse a profile CSV into a library.

    Schema: header ``profile_id,kind,slot,watts``; kind is ``load`` or
    ``pv``; slots are 0-based, contiguous and sorted within a profile;
    PV watts must be <= 0. Errors name the offending line.
    """
    loads: dict[str, list[float]] = {}
    pvs: dict[str, list[float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ScenarioError(f"{path}: no profiles")
    if lines[0].strip() != _CSV_HEADER:
        raise ScenarioError(f"{path}, line 1: expected header {_CSV_HEADER!r}")
    current: tuple[str, str] | None = None
    finished: set[tuple[str, str]] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ScenarioError(f"{path}, line {lineno}: expected 4 columns, got {len(parts)}")
        profile_id, kind, slot_text, watts_text = (p.strip() for p in parts)
        if kind not in ("load", "pv"):
            raise ScenarioError(f"{path}, line {lineno}: unknown kind {kind!r} (column 2)")
        try:
            slot = int(slot_text)
        except ValueError:
            raise ScenarioError(f"{path}, line {lineno}: bad slot {slot_text!r} (column 3)") from None
        try:
            watts = float(watts_text)
        except ValueError:
            raise ScenarioError(f"{path}, line {lineno}: bad watts {watts_text!r} (column 4)") from None
        if math.isnan(watts) or math.isinf(watts):
            raise ScenarioError(f"{path}, line {lineno}: non-finite watts (column 4)")
        if kind == "pv" and watts > 0.0:
            raise ScenarioError(f"{path}, line {lineno}: positive PV watts (column 4)")
        key = (kind, profile_id)
        store = loads if kind == "load" else pvs
        if key != current:
            if key in finished:
                raise ScenarioError(
                    f"{path}, line {lineno}: rows for profile {profile_id!r} are not contiguous"
                )
            if current is not None:
                finished.add(current)
            current = key
            store[profile_id] = []
        values = store[profile_id]
        if slot != len(values):
            raise ScenarioError(
                f"{path}, line {lineno}: expected slot {len(values)}, got {slot}"
            )
        values.append(watts)
    if not loads and not pvs:
        raise ScenarioError(f"{path}: no profiles")
    return ProfileLibrary(
        loads={k: as_profile(v) for k, v in loads.items()},
        pvs={k: as_profile(v) for k, v in pvs.items()},
    )


def compute_theta(library: ProfileLibrary, households: int) -> np.ndarray:
    """Cluster target: household count times the mean household net profile
    (average load plus average PV production)."""
    if households < 0:
        raise ScenarioError("household count must be >= 0")
    return households * (library.load_avg + library.pv_avg)


# --------------------------------------------------------------------------
# Synthetic generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerateParams:
    """Knobs of the synthetic scenario generator.

    All randomness flows from the single seed passed to
    ``generate_scenario``; same parameters and seed give a byte-identical
    scenario. Heat-pump capacity is stored electrical-side: a buffer
    holding ``heat_pump_capacity_wh * cop`` Wh of heat needs
    ``heat_pump_capacity_wh`` Wh of electricity at the given coefficient
    of performance.
    """

    households: int = 54
    congestion_nodes: int = 6
    batteries: int = 16
    heat_pumps: int = 16
    beta: float = 30000.0        # W, same limit for every congestion node
    horizon: int = 24            # T
    tau: float = 1.0             # h
    steps: int = 24
    epsilon_max: float = 1e-3
    max_iters: int = 1000
    probe_step: float = 0.1
    daily_load_kwh: tuple[float, float] = (4.98, 29.39)
    daily_pv_kwh: tuple[float, float] = (0.826, 18.8)
    battery_capacity_wh: float = 10800.0
    battery_power_w: float = 4000.0
    battery_eta: float = 0.9
    heat_pump_capacity_wh: float = 2000.0
    heat_pump_cop: float = 4.0
    heat_pump_power_w: float = 1600.0
    heat_pump_leakage_w: float = 360.0
    ramp_width: float = 0.075


def _diurnal_load_shape() -> np.ndarray:
    hours = np.arange(24.0)
    base = 0.5
    morning = 1.6 * np.exp(-0.5 * ((hours - 7.5) / 1.5) ** 2)
    evening = 2.2 * np.exp(-0.5 * ((hours - 19.0) / 2.5) ** 2)
    return base + morning + evening


def _diurnal_pv_shape() -> np.ndarray:
    hours = np.arange(24.0)
    return np.where(
        (hours >= 6.0) & (hours <= 18.0),
        np.sin(np.pi * (hours - 6.0) / 12.0),
        0.0,
    )


def _synth_profile(shape: np.ndarray, daily_kwh: float, length: int, tau: float,
                   rng: np.random.Generator) -> np.ndarray:
    tiled = np.tile(shape, length // 24 + 1)[:length]
    jitter = rng.uniform(0.85, 1.15, size=length)
    raw = tiled * jitter
    total = raw.sum() * tau  # Wh if raw were watts
    if total <= 0.0:
        return np.zeros(length)
    scale = daily_kwh * 1000.0 * (length * tau / 24.0) / total
    return raw * scale


def generate_scenario(params: GenerateParams, seed: int):
    """Build a deterministic synthetic scenario.

    Returns the scenario and the profile library it draws from. Draw
    order is fixed: load profile pool, PV profile pool, per-household
    profile assignments, battery households, heat-pump households, then
    household placement on the congestion nodes, so adding devices never
    reshuffles earlier draws.
    """
    if params.batteries > params.households or params.heat_pumps > params.households:
        raise ScenarioError("more storage devices than households")
    if params.congestion_nodes < 0 or params.households < 0:
        raise ScenarioError("counts must be >= 0")
    rng = np.random.default_rng(seed)
    n = params.households
    length = params.steps + params.horizon - 1 if n else params.horizon
    load_shape = _diurnal_load_shape()
    pv_shape = _diurnal_pv_shape()

    loads: dict[str, np.ndarray] = {}
    pvs: dict[str, np.ndarray] = {}
    for i in range(n):
        daily = rng.uniform(*params.daily_load_kwh)
        loads[f"load{i:03d}"] = as_profile(
            _synth_profile(load_shape, daily, length, params.tau, rng)
        )
    for i in range(n):
        daily = rng.uniform(*params.daily_pv_kwh)
        pvs[f"pv{i:03d}"] = as_profile(
            -_synth_profile(pv_shape, daily, length, params.tau, rng)
        )

    # households pick from the profile pool with replacement, so the sum of
    # assigned profiles genuinely deviates from the pool average the target
    # is built from
    load_pick = rng.integers(0, n, size=n) if n else np.zeros(0, dtype=int)
    pv_pick = rng.integers(0, n, size=n) if n else np.zeros(0, dtype=int)
    battery_homes = set(rng.choice(n, size=params.batteries, replace=False).tolist()) if params.batteries else set()
    hp_homes = set(rng.choice(n, size=params.heat_pumps, replace=False).tolist()) if params.heat_pumps else set()
    n_cong = params.congestion_nodes if n else 0
    placement = rng.integers(0, n_cong, size=n) if n_cong else np.zeros(n, dtype=int)

    library = ProfileLibrary(loads=loads, pvs=pvs) if n else ProfileLibrary(
        loads={}, pvs={"empty": np.zeros(length)}
    )

    kinds: dict[str, NodeKind] = {"mo": MarketOperator()}
    children: dict[str, list[str]] = {"mo": []}
    cong_ids = [f"c{i + 1}" for i in range(n_cong)]
    for idx, cid in enumerate(cong_ids):
        kinds[cid] = Congestion(beta=params.beta)
        children[cid] = []
        if idx < 3:
            children["mo"].append(cid)
        else:
            # extra congestion nodes nest under the first two top-level ones
            children[cong_ids[(idx - 3) % 2]].append(cid)

    load_avg = library.load_avg
    pv_avg = library.pv_avg
    battery = Storage(
        x_min=-params.battery_power_w,
        x_max=params.battery_power_w,
        e_min=0.0,
        e_max=params.battery_capacity_wh,
        eta=params.battery_eta,
        leakage=0.0,
        e0=params.battery_capacity_wh / 2.0,
        ramp_width=params.ramp_width,
    )
    heat_pump = Storage(
        x_min=0.0,
        x_max=params.heat_pump_power_w,
        e_min=0.0,
        e_max=params.heat_pump_capacity_wh,
        eta=1.0,
        leakage=params.heat_pump_leakage_w,
        e0=params.heat_pump_capacity_wh / 2.0,
        ramp_width=params.ramp_width,
    )
    for i in range(n):
        parent = cong_ids[placement[i]] if n_cong else "mo"
        hid = f"h{i:03d}"
        kinds[f"{hid}_load"] = Load(
            actual=loads[f"load{load_pick[i]:03d}"], historical_avg=load_avg
        )
        children[parent].append(f"{hid}_load")
        kinds[f"{hid}_pv"] = Pv(
            actual=pvs[f"pv{pv_pick[i]:03d}"], historical_avg=pv_avg
        )
        children[parent].append(f"{hid}_pv")
        if i in battery_homes:
            kinds[f"{hid}_batt"] = battery
            children[parent].append(f"{hid}_batt")
        if i in hp_homes:
            kinds[f"{hid}_hp"] = heat_pump
            children[parent].append(f"{hid}_hp")

    # drop congestion nodes that received neither households nor children
    for cid in reversed(cong_ids):
        if not children[cid]:
            del kinds[cid]
            del children[cid]
            for offspring in children.values():
                if cid in offspring:
                    offspring.remove(cid)

    tree = GridTree(
        root="mo",
        children={k: tuple(v) for k, v in children.items()},
        kinds=kinds,
    )
    theta = compute_theta(library, n) if n else np.zeros(length)
    scn = Scenario(
        grid=TimeGrid(params.horizon, params.tau),
        tree=tree,
        theta=theta,
        solver=NegotiationParams(
            epsilon_max=params.epsilon_max,
            max_iters=params.max_iters,
            probe_step=params.probe_step,
        ),
        seed=seed,
        steps=params.steps,
    )
    return scn, library


def relax_scenario(scn: Scenario, factor: float) -> Scenario:
    """Scale every congestion limit by ``factor`` (>= 1); all else unchanged."""
    if factor < 1.0:
        raise ScenarioError(f"relaxation factor must be >= 1, got {factor}")
    kinds = {
        n: Congestion(beta=k.beta * factor) if isinstance(k, Congestion) else k
        for n, k in scn.tree.kinds.items()
    }
    tree = GridTree(root=scn.tree.root, children=scn.tree.children, kinds=kinds)
    return replace(scn, tree=tree)


# --------------------------------------------------------------------------
# Scenario JSON
# --------------------------------------------------------------------------

_TOP_KEYS = {"time_grid", "nodes", "devices", "theta", "solver", "seed", "steps"}
_SOLVER_KEYS = {"epsilon_max", "max_iters", "probe_step"}
_NODE_KEYS = {"id", "kind", "parent", "beta"}
_DEVICE_KEYS = {
    "load": {"id", "parent", "kind", "actual", "historical_avg"},
    "pv": {"id", "parent", "kind", "actual", "historical_avg", "gamma"},
    "storage": {
        "id", "parent", "kind", "x_min", "x_max", "e_min", "e_max",
        "eta", "leakage", "e0", "ramp_width",
    },
}


def _reject_unknown(mapping: dict, allowed: set, where: str):
    unknown = set(mapping) - allowed
    if unknown:
        names = ", ".join(sorted(unknown))
        raise ScenarioError(f"unknown keys in {where}: {names}")


def scenario_to_dict(scn: Scenario) -> dict:
    nodes = []
    devices = []
    for node in scn.tree.preorder:
        kind = scn.tree.kind_of(node)
        parent = scn.tree.parent_of(node)
        if isinstance(kind, MarketOperator):
            nodes.append({"id": node, "kind": "market_operator", "parent": None})
        elif isinstance(kind, Congestion):
            nodes.append({"id": node, "kind": "congestion", "parent": parent, "beta": kind.beta})
        elif isinstance(kind, Load):
            devices.append({
                "id": node, "parent": parent, "kind": "load",
                "actual": kind.actual.tolist(),
                "historical_avg": kind.historical_avg.tolist(),
            })
        elif isinstance(kind, Pv):
            devices.append({
                "id": node, "parent": parent, "kind": "pv",
                "actual": kind.actual.tolist(),
                "historical_avg": kind.historical_avg.tolist(),
                "gamma": kind.gamma,
            })
        else:
            devices.append({
                "id": node, "parent": parent, "kind": "storage",
                "x_min": kind.x_min, "x_max": kind.x_max,
                "e_min": kind.e_min, "e_max": kind.e_max,
                "eta": kind.eta, "leakage": kind.leakage,
                "e0": kind.e0, "ramp_width": kind.ramp_width,
            })
    return {
        "time_grid": {"T": scn.grid.T, "tau": scn.grid.tau},
        "nodes": nodes,
        "devices": devices,
        "theta": scn.theta.tolist(),
        "solver": {
            "epsilon_max": scn.solver.epsilon_max,
            "max_iters": scn.solver.max_iters,
            "probe_step": scn.solver.probe_step,
        },
        "seed": scn.seed,
        "steps": scn.steps,
    }


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario document must be a JSON object")
    _reject_unknown(data, _TOP_KEYS, "scenario")
    for key in ("time_grid", "nodes", "devices", "solver", "seed", "steps"):
        if key not in data:
            raise ScenarioError(f"scenario is missing required key {key!r}")
    tg = data["time_grid"]
    _reject_unknown(tg, {"T", "tau"}, "time_grid")
    try:
        grid = TimeGrid(T=int(tg["T"]), tau=float(tg.get("tau", 1.0)))
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"bad time_grid: {exc}") from None

    kinds: dict[str, NodeKind] = {}
    children: dict[str, list[str]] = {}
    root = None
    for entry in data["nodes"]:
        _reject_unknown(entry, _NODE_KEYS, f"node {entry.get('id')!r}")
        nid = entry["id"]
        if nid in kinds:
            raise ScenarioError(f"duplicate node id {nid!r}")
        kind_name = entry.get("kind")
        if kind_name == "market_operator":
            kinds[nid] = MarketOperator()
            if entry.get("parent") is not None:
                raise ScenarioError("the market operator cannot have a parent")
            if root is not None:
                raise ScenarioError("more than one market operator")
            root = nid
        elif kind_name == "congestion":
            if "beta" not in entry:
                raise ScenarioError(f"congestion node {nid!r} is missing beta")
            kinds[nid] = Congestion(beta=float(entry["beta"]))
        else:
            raise ScenarioError(f"node {nid!r} has unknown kind {kind_name!r}")
        children.setdefault(nid, [])
        parent = entry.get("parent")
        if parent is not None:
            children.setdefault(parent, []).append(nid)
    if root is None:
        raise ScenarioError("scenario has no market operator node")

    for entry in data["devices"]:
        kind_name = entry.get("kind")
        if kind_name not in _DEVICE_KEYS:
            raise ScenarioError(f"device {entry.get('id')!r} has unknown kind {kind_name!r}")
        _reject_unknown(entry, _DEVICE_KEYS[kind_name], f"device {entry.get('id')!r}")
        nid = entry["id"]
        if nid in kinds:
            raise ScenarioError(f"duplicate node id {nid!r}")
        parent = entry.get("parent")
        if parent is None:
            raise ScenarioError(f"device {nid!r} has no parent")
        try:
            if kind_name == "load":
                kinds[nid] = Load(
                    actual=entry["actual"], historical_avg=entry["historical_avg"]
                )
            elif kind_name == "pv":
                kinds[nid] = Pv(
                    actual=entry["actual"],
                    historical_avg=entry["historical_avg"],
                    gamma=float(entry.get("gamma", 0.2)),
                )
            else:
                kinds[nid] = Storage(
                    x_min=float(entry["x_min"]), x_max=float(entry["x_max"]),
                    e_min=float(entry["e_min"]), e_max=float(entry["e_max"]),
                    eta=float(entry["eta"]), leakage=float(entry["leakage"]),
                    e0=float(entry["e0"]),
                    ramp_width=float(entry.get("ramp_width", 0.075)),
                )
        except KeyError as exc:
            raise ScenarioError(f"device {nid!r} is missing field {exc.args[0]!r}") from None
        children.setdefault(parent, []).append(nid)

    try:
        tree = GridTree(
            root=root,
            children={k: tuple(v) for k, v in children.items()},
            kinds=kinds,
        )
    except StructureError as exc:
        raise ScenarioError(str(exc)) from None

    solver = data["solver"]
    _reject_unknown(solver, _SOLVER_KEYS, "solver")
    params = NegotiationParams(
        epsilon_max=float(solver.get("epsilon_max", 1e-3)),
        max_iters=int(solver.get("max_iters", 1000)),
        probe_step=float(solver.get("probe_step", 0.1)),
    )

    theta = data.get("theta")
    if theta is None:
        length = None
        for kind in kinds.values():
            if isinstance(kind, (Load, Pv)):
                length = kind.actual.shape[0]
                break
        if length is None:
            raise ScenarioError("scenario without profiles needs an explicit theta")
        lib_loads = {
            n: k.actual for n, k in kinds.items() if isinstance(k, Load)
        }
        lib_pvs = {n: k.actual for n, k in kinds.items() if isinstance(k, Pv)}
        library = ProfileLibrary(loads=lib_loads, pvs=lib_pvs)
        theta = compute_theta(library, len(lib_loads))

    try:
        return Scenario(
            grid=grid,
            tree=tree,
            theta=theta,
            solver=params,
            seed=int(data["seed"]),
            steps=int(data["steps"]),
        )
    except (StructureError, ValueError) as exc:
        raise ScenarioError(str(exc)) from None


def save_scenario(scn: Scenario, path):
    text = json.dumps(scenario_to_dict(scn), indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(data)
