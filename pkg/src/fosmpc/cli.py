"""Command line interface: run scenarios, ablation studies, and the
brute-force solver audit, with deterministic CSV logging.

Numbers are written with 17 significant digits so that identical runs
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .dynamics import AgentParams, AgentState
from .ocp import CostWeights, FhocpSpec, Horizons, J_HAT_INF
from .safeset import Ball
from .scenario import (PRESET_NAMES, ScenarioConfig, ScenarioError,
                       crossing_scenario, deceleration_scenario, load_scenario,
                       preset)
from .sim import RunMetrics, SimulationError, StepRecord, oracle_bruteforce, run_scenario
from .solver import SolverOptions, solve_fhocp

CSV_COLUMNS = ("t", "agent_id", "px", "py", "vx", "vy", "ux", "uy",
               "set_cx", "set_cy", "set_R", "frozen", "Jc", "Jhat",
               "solver_status", "residual", "min_pair_dist")


def _fmt(x: float) -> str:
    """Decimal formatting with 17 significant digits (round-trip exact)."""
    if isinstance(x, bool):
        return "1" if x else "0"
    return format(float(x), ".17g")


def _resolve_scenario(name: str, seed: Optional[int]) -> ScenarioConfig:
    if name in PRESET_NAMES:
        return preset(name, seed=seed if seed is not None else 0)
    cfg = load_scenario(name)
    if seed is not None:
        cfg.seed = seed
    return cfg


def write_step_csv(path: str, records: Sequence[StepRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            for i in sorted(rec.per_agent):
                log = rec.per_agent[i]
                row = [str(rec.t), str(i),
                       _fmt(log.state[0]), _fmt(log.state[1]),
                       _fmt(log.state[2]), _fmt(log.state[3]),
                       _fmt(log.u[0]), _fmt(log.u[1]),
                       _fmt(log.ball.c[0]), _fmt(log.ball.c[1]),
                       _fmt(log.ball.R), _fmt(log.frozen),
                       _fmt(log.J_c), _fmt(log.J_hat), log.status,
                       _fmt(log.residual), _fmt(rec.min_pair_dist)]
                fh.write(",".join(row) + "\n")


def write_plot_data(out_dir: str, records: Sequence[StepRecord],
                    metrics: RunMetrics) -> None:
    """Per-figure data series: pairwise distances, set gaps, freeze counts,
    and the normalized backup-cost evolution."""
    with open(os.path.join(out_dir, "distances.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("t,min_pair_dist,min_set_gap,freeze_count\n")
        for rec in records:
            fh.write(f"{rec.t},{_fmt(rec.min_pair_dist)},"
                     f"{_fmt(rec.min_set_gap)},{rec.freeze_count}\n")
    ids = sorted(metrics.Jc_series)
    with open(os.path.join(out_dir, "normalized_cost.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("t," + ",".join(f"agent_{i}" for i in ids) + "\n")
        series = {i: metrics.normalized_Jc(i) for i in ids}
        # Agents can join late or leave early; align every series on the end
        # of the run and pad the missing prefix.
        for t in range(metrics.steps):
            vals = []
            for i in ids:
                s = series[i]
                k = t - (metrics.steps - len(s))
                vals.append(_fmt(s[k]) if 0 <= k < len(s) else "")
            fh.write(f"{t}," + ",".join(vals) + "\n")


def write_summary(path: str, metrics: RunMetrics, config: ScenarioConfig) -> None:
    data = {
        "scenario": config.name,
        "seed": config.seed,
        "steps": metrics.steps,
        "terminated_converged": metrics.terminated_converged,
        "collision_free": metrics.collision_free,
        "min_body_distance": metrics.min_body_distance,
        "min_set_gap": metrics.min_set_gap,
        "disjointness_violations": metrics.disjointness_violations,
        "max_lyap_violation": metrics.max_lyap_violation,
        "max_candidate_residual": metrics.max_candidate_residual,
        "max_shifted_cost_error": metrics.max_shifted_cost_error,
        "fallback_count": metrics.fallback_count,
        "freeze_steps": metrics.freeze_steps,
        "steps_to_convergence": {str(k): v for k, v in
                                 metrics.steps_to_convergence.items()},
        "events": [{"t": e.t, "kind": e.kind, "detail": e.detail}
                   for e in metrics.events],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def run_command(config: ScenarioConfig, out_dir: str, strict: bool = False,
                parallel: int = 0) -> int:
    os.makedirs(out_dir, exist_ok=True)
    try:
        metrics, records = run_scenario(config, strict=strict, parallel=parallel)
    except SimulationError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 1
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 2
    write_step_csv(os.path.join(out_dir, "steps.csv"), records)
    write_plot_data(out_dir, records, metrics)
    write_summary(os.path.join(out_dir, "summary.json"), metrics, config)
    bad = [e for e in metrics.events
           if e.kind in ("collision", "overlap", "candidate-infeasible",
                         "lyap-violation", "shifted-cost", "footprint")]
    if bad:
        print(f"{len(bad)} invariant violations logged "
              f"(first: step {bad[0].t} {bad[0].kind})", file=sys.stderr)
        return 1
    print(f"{config.name}: {metrics.steps} steps, "
          f"{'converged' if metrics.terminated_converged else 'step limit'}, "
          f"{metrics.fallback_count} fallbacks, "
          f"{metrics.freeze_steps} freeze events")
    return 0


ABLATION_SCENARIOS = {
    "tail": (deceleration_scenario, "disable_tail_constraint",
             "candidate-infeasible"),
    "fos": (crossing_scenario, "disable_fos", "overlap"),
    "lyap": (deceleration_scenario, "disable_lyap_constraint",
             "lyap-violation"),
}


def ablate_command(which: str, out_dir: str,
                   config: Optional[ScenarioConfig] = None) -> int:
    """Run the crafted counterexample with one mechanism disabled, then the
    full scheme on the same scenario, and report the event counts."""
    if which not in ABLATION_SCENARIOS:
        print(f"unknown ablation {which!r}", file=sys.stderr)
        return 2
    make, flag, event_kind = ABLATION_SCENARIOS[which]
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for label, disabled in (("ablated", True), ("full", False)):
        cfg = config if config is not None else make()
        setattr(cfg, flag, disabled)
        metrics, records = run_scenario(cfg, strict=False)
        count = sum(1 for e in metrics.events if e.kind == event_kind)
        results[label] = count
        sub = os.path.join(out_dir, label)
        os.makedirs(sub, exist_ok=True)
        write_step_csv(os.path.join(sub, "steps.csv"), records)
        write_summary(os.path.join(sub, "summary.json"), metrics, cfg)
    report = {"which": which, "event_kind": event_kind,
              "ablated_events": results["ablated"],
              "full_events": results["full"]}
    with open(os.path.join(out_dir, "ablation.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(f"ablate {which}: {results['ablated']} {event_kind} events without "
          f"the mechanism, {results['full']} with the full scheme")
    return 0


def random_oracle_instance(rng: np.random.Generator,
                           params: AgentParams) -> FhocpSpec:
    """Random one-dimensional backup-planning instance on the braking grid.

    Initial speeds are multiples of Ts*a_max so that exact rest is reachable
    on the three-level input grid.
    """
    quantum = params.Ts * params.a_max
    k = int(rng.integers(-3, 4))
    v0 = k * quantum
    p0 = float(rng.uniform(-1.0, 1.0))
    R = float(rng.uniform(0.3, 1.6))
    c = p0 + float(rng.uniform(-0.5, 0.5))
    x_ref = float(rng.uniform(-2.0, 2.0))
    return FhocpSpec(
        agent_id=0, params=params,
        x0=AgentState(p=[p0, 0.0], v=[v0, 0.0]),
        active_set=Ball(c=[c, 0.0], R=R),
        neighbor_sets=[], obstacles=[],
        x_ref=AgentState(p=[x_ref, 0.0], v=[0.0, 0.0]),
        J_hat=J_HAT_INF,
        horizons=Horizons(N_n=3, N_c=3),
        weights=CostWeights())


def oracle_command(out_dir: str, n_instances: int = 200, seed: int = 0) -> int:
    """Compare the solver against exhaustive search on random 1-D instances."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    params = AgentParams()
    opts = SolverOptions(objective="contingency")
    rows = []
    mismatches = 0
    cost_gaps = []
    for n in range(n_instances):
        spec = random_oracle_instance(rng, params)
        oracle = oracle_bruteforce(spec)
        sol, report = solve_fhocp(spec, opts)
        solver_feasible = sol.residual <= 1e-6
        gap = (sol.J_c - oracle.best_cost) if (oracle.feasible and solver_feasible) \
            else math.nan
        if oracle.feasible and not solver_feasible:
            mismatches += 1
        if not math.isnan(gap):
            cost_gaps.append(gap)
        rows.append({"instance": n, "oracle_feasible": oracle.feasible,
                     "oracle_cost": oracle.best_cost if oracle.feasible else None,
                     "solver_feasible": solver_feasible,
                     "solver_cost": sol.J_c, "cost_gap": gap})
    worst_gap = max(cost_gaps) if cost_gaps else 0.0
    report_data = {"instances": n_instances, "mismatches": mismatches,
                   "worst_cost_gap": worst_gap}
    with open(os.path.join(out_dir, "oracle.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({"summary": report_data, "rows": rows}, fh, indent=2)
        fh.write("\n")
    print(f"oracle: {mismatches} feasibility mismatches, "
          f"worst cost gap {worst_gap:.3e} over {n_instances} instances")
    return 0 if (mismatches == 0 and worst_gap <= 1e-3) else 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fosmpc",
        description="Decentralized contingency MPC simulator with "
                    "freeze-or-shift safe sets")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file or preset")
    p_run.add_argument("--scenario", required=True,
                       help=f"JSON file or preset ({', '.join(PRESET_NAMES)})")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--strict", action="store_true",
                       help="abort on the first invariant violation")
    p_run.add_argument("--parallel", type=int, default=0,
                       help="solver threads per step (0 = sequential)")

    p_abl = sub.add_parser("ablate", help="run an ablation counterexample")
    p_abl.add_argument("--scenario", default=None,
                       help="optional scenario file (default: crafted case)")
    p_abl.add_argument("--which", required=True, choices=("tail", "fos", "lyap"))
    p_abl.add_argument("--out", required=True)

    p_or = sub.add_parser("oracle", help="run the brute-force solver audit")
    p_or.add_argument("--out", required=True)
    p_or.add_argument("--instances", type=int, default=200)
    p_or.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = _resolve_scenario(args.scenario, args.seed)
            return run_command(cfg, args.out, strict=args.strict,
                               parallel=args.parallel)
        if args.command == "ablate":
            cfg = load_scenario(args.scenario) if args.scenario else None
            return ablate_command(args.which, args.out, cfg)
        if args.command == "oracle":
            return oracle_command(args.out, args.instances, args.seed)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
