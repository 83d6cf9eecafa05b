"""Command-line surface: run experiments, compare solvers, generate scenarios.

Exit codes: 0 on success (for ``run``: feasible), 2 when ``run`` finds an
infeasible dispatch, 1 on usage or input errors. All result files are
deterministic for identical inputs and seed; wall-clock timings go to a
separate ``timings.json`` that is excluded from that guarantee.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import central, horizon, scenario as scenario_mod
from .core import DispatchResult
from .scenario import GenerateParams, ScenarioError, generate_scenario

SOLVER_MARKET = "market"
SOLVER_CENTRAL_RH = "central_rh"
SOLVER_CENTRAL_PERFECT = "central_perfect"

CLASS_FEASIBLE = "feasible"
CLASS_MARKET_FAILED = "market_failed"
CLASS_OVERCONSTRAINED = "overconstrained"

IDENTICAL_TOL_WH = 1e-6


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: str, header: list[str], rows: list[list]):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            _fmt(v) if isinstance(v, float) else str(v) for v in row
        ))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_json(path: str, payload):
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_run_outputs(scn, result: DispatchResult, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for node in sorted(result.contracted):
        for ptu, watts in enumerate(result.contracted[node]):
            rows.append([node, ptu, float(watts)])
    _write_csv(os.path.join(out_dir, "contracts.csv"),
               ["node_id", "ptu", "watts"], rows)

    price_rows = []
    internal = set(scn.tree.internal_nodes)
    for node in sorted(internal):
        for ptu, trace in enumerate(result.step_traces):
            price_rows.append([node, ptu, float(trace[node].local_prices[0])])
    _write_csv(os.path.join(out_dir, "prices.csv"),
               ["node_id", "ptu", "price"], price_rows)

    summary = {
        "objective_wh": result.total_loss_energy,
        "feasible": result.feasible,
        "steps": len(result.losses),
        "iterations_per_step": list(result.iterations_per_step),
        "converged_per_step": list(result.converged_per_step),
        "violations": [
            {"node_id": v.node_id, "ptu": v.ptu, "watts": v.magnitude}
            for v in result.violations
        ],
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)


def cmd_run(scenario_path: str, out_dir: str, perfect_forecast: bool = False) -> int:
    scn = scenario_mod.load_scenario(scenario_path)
    result = horizon.run_simulation(scn, perfect_forecast=perfect_forecast)
    _write_run_outputs(scn, result, out_dir)
    return 0 if result.feasible else 2


def _classify(market: DispatchResult, receding: DispatchResult,
              perfect: central.CentralSolution) -> str:
    overconstrained = not all(receding.converged_per_step)
    if overconstrained:
        return CLASS_OVERCONSTRAINED
    if market.feasible and receding.feasible and perfect.status == central.OPTIMAL:
        return CLASS_FEASIBLE
    return CLASS_MARKET_FAILED


def _compare_instance(scn, perfect_forecast: bool):
    timings = {}
    t0 = time.perf_counter()
    market = horizon.run_simulation(scn, perfect_forecast=perfect_forecast)
    timings[SOLVER_MARKET] = time.perf_counter() - t0
    t0 = time.perf_counter()
    receding = central.solve_receding(scn, perfect_forecast=perfect_forecast)
    timings[SOLVER_CENTRAL_RH] = time.perf_counter() - t0
    t0 = time.perf_counter()
    perfect = central.solve_perfect(central.perfect_problem(scn))
    timings[SOLVER_CENTRAL_PERFECT] = time.perf_counter() - t0

    label = _classify(market, receding, perfect)
    perfect_obj = perfect.objective if perfect.status == central.OPTIMAL else float("nan")
    identical = (
        label == CLASS_FEASIBLE
        and abs(market.total_loss_energy - perfect_obj) <= IDENTICAL_TOL_WH
    )
    row = {
        "seed": scn.seed,
        "class": label,
        "market_wh": market.total_loss_energy,
        "central_rh_wh": receding.total_loss_energy,
        "central_perfect_wh": perfect_obj,
        "identical_to_perfect": identical,
        "iterations": int(sum(market.iterations_per_step)),
    }
    return row, timings


def cmd_compare(args) -> int:
    instances = []
    if args.batch is not None:
        params = GenerateParams(
            households=args.households,
            congestion_nodes=args.congestion,
            batteries=args.batteries,
            heat_pumps=args.heatpumps,
            beta=args.beta,
            horizon=args.horizon,
            steps=args.steps,
        )
        for seed in range(args.seed, args.seed + args.batch):
            scn, _ = generate_scenario(params, seed)
            instances.append(scn)
    else:
        instances.append(scenario_mod.load_scenario(args.scenario))
    if args.relax is not None:
        instances = [scenario_mod.relax_scenario(s, args.relax) for s in instances]

    os.makedirs(args.out, exist_ok=True)
    rows = []
    timing_rows = []
    for idx, scn in enumerate(instances):
        row, timings = _compare_instance(scn, args.perfect_forecast)
        row["instance"] = idx
        rows.append(row)
        timing_rows.append({"instance": idx, "seed": scn.seed, **timings})

    header = ["instance", "seed", "class", "market_wh", "central_rh_wh",
              "central_perfect_wh", "identical_to_perfect", "iterations"]
    csv_rows = [
        [r["instance"], r["seed"], r["class"], r["market_wh"], r["central_rh_wh"],
         r["central_perfect_wh"], r["identical_to_perfect"], r["iterations"]]
        for r in rows
    ]
    _write_csv(os.path.join(args.out, "report.csv"), header, csv_rows)

    feasible_rows = [r for r in rows if r["class"] == CLASS_FEASIBLE]
    ratios = [
        r["market_wh"] / r["central_perfect_wh"]
        for r in feasible_rows
        if r["central_perfect_wh"] > 0
    ]
    summary = {
        "instances": len(rows),
        "classes": {
            CLASS_FEASIBLE: sum(1 for r in rows if r["class"] == CLASS_FEASIBLE),
            CLASS_MARKET_FAILED: sum(1 for r in rows if r["class"] == CLASS_MARKET_FAILED),
            CLASS_OVERCONSTRAINED: sum(
                1 for r in rows if r["class"] == CLASS_OVERCONSTRAINED
            ),
        },
        "median_loss_ratio_vs_perfect": (
            float(np.median(ratios)) if ratios else None
        ),
        "identical_to_perfect_fraction": (
            sum(1 for r in feasible_rows if r["identical_to_perfect"]) / len(feasible_rows)
            if feasible_rows else None
        ),
        "rows": rows,
    }
    _write_json(os.path.join(args.out, "report.json"), summary)

    box_rows = []
    for r in rows:
        if r["class"] != CLASS_FEASIBLE:
            continue
        box_rows.append([SOLVER_MARKET, r["instance"], r["market_wh"] / 1000.0])
        box_rows.append([SOLVER_CENTRAL_RH, r["instance"], r["central_rh_wh"] / 1000.0])
        box_rows.append(
            [SOLVER_CENTRAL_PERFECT, r["instance"], r["central_perfect_wh"] / 1000.0]
        )
    _write_csv(os.path.join(args.out, "boxplot.csv"),
               ["solver", "instance", "loss_kWh"], box_rows)

    _write_json(os.path.join(args.out, "timings.json"), timing_rows)
    return 0


def cmd_generate(args) -> int:
    params = GenerateParams(
        households=args.households,
        congestion_nodes=args.congestion,
        batteries=args.batteries,
        heat_pumps=args.heatpumps,
        beta=args.beta,
        horizon=args.horizon,
        steps=args.steps,
    )
    scn, _ = generate_scenario(params, args.seed)
    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    text = json.dumps(scenario_mod.scenario_to_dict(scn), indent=2, sort_keys=True)
    _atomic_write(args.out, text + "\n")
    return 0


def _add_generation_flags(parser, for_compare: bool = False):
    parser.add_argument("--households", type=int, default=54)
    parser.add_argument("--batteries", type=int, default=16)
    parser.add_argument("--heatpumps", type=int, default=16)
    parser.add_argument("--congestion", type=int, default=6)
    parser.add_argument("--beta", type=float, default=30000.0,
                        help="congestion limit in W for every congestion node")
    parser.add_argument("--horizon", type=int, default=24, help="window length T")
    parser.add_argument("--steps", type=int, default=24,
                        help="number of PTUs to simulate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridmarket",
        description="Market-based dispatch simulation on tree-shaped grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate the market rollout of one scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--perfect-forecast", action="store_true")

    p_cmp = sub.add_parser("compare", help="run all three solvers and classify")
    p_cmp.add_argument("scenario", nargs="?", help="scenario file (omit with --batch)")
    p_cmp.add_argument("--batch", type=int, default=None,
                       help="generate and compare N seeded instances")
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--relax", type=float, default=None,
                       help="multiply every congestion limit by this factor")
    p_cmp.add_argument("--perfect-forecast", action="store_true")
    _add_generation_flags(p_cmp, for_compare=True)

    p_gen = sub.add_parser("generate", help="write a synthetic scenario file")
    _add_generation_flags(p_gen)
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", required=True, help="output scenario path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        if args.command == "run":
            return cmd_run(args.scenario, args.out, args.perfect_forecast)
        if args.command == "compare":
            if (args.scenario is None) == (args.batch is None):
                print("compare needs either a scenario file or --batch N",
                      file=sys.stderr)
                return 1
            return cmd_compare(args)
        if args.command == "generate":
            return cmd_generate(args)
        parser.error(f"unknown command {args.command!r}")
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
