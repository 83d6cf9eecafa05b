"""Market-based economic dispatch for tree-shaped distribution grids.

Price signals travel down an agent hierarchy (market operator,
congestion nodes, device leaves), power programs travel back up, and a
per-slot secant search on the prices drives the aggregate toward the
target while keeping every congestion band respected. Centralized
solvers provide exact baselines for the same problem.
"""

from .agents import (
    DeviceResponse,
    device_response,
    load_response,
    pv_response,
    storage_energy_trajectory,
    storage_loss,
    storage_response,
    storage_response_curve,
)
from .central import (
    INFEASIBLE,
    OPTIMAL,
    CentralSolution,
    DispatchProblem,
    brute_force_oracle,
    perfect_problem,
    solve_perfect,
    solve_receding,
    verify_solution,
)
from .coordination import (
    NegotiationOutcome,
    NegotiationParams,
    PriceSearchState,
    adjust_prices,
    congestion_error,
    negotiate,
    negotiate_root,
    target_error,
)
from .core import (
    Congestion,
    DispatchResult,
    DomainError,
    GridTree,
    Load,
    MarketOperator,
    Pv,
    Storage,
    StructureError,
    TimeGrid,
    Violation,
    as_profile,
    sum_profiles,
)
from .horizon import forecast_blend, run_simulation, window_tree
from .scenario import (
    GenerateParams,
    ProfileLibrary,
    Scenario,
    ScenarioError,
    compute_theta,
    generate_scenario,
    load_profile_csv,
    load_scenario,
    relax_scenario,
    save_scenario,
)

__version__ = "0.1.0"
