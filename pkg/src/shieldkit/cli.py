"""Command-line entry point.

Every subcommand writes its artifacts to the output directory (``--out``,
default ``$SHIELDKIT_OUTPUT_DIR`` or the working directory) and prints a
summary block of ``key=value`` lines between ``[summary]`` and ``[end]``.
Exit codes: 0 success, 2 invalid configuration, 3 infeasible synthesis.
"""

from __future__ import annotations

import argparse
import csv
import functools
import os
import sys
from pathlib import Path

import numpy as np

from . import fairness_shield as fs
from . import models
from .errors import InfeasibleSynthesis, InvalidConfig, ShieldkitError
from .intention import (EvidenceThresholds, FactoredScenario, LabeledMdp, ScenarioInstance,
                        read_scenario, retrospective_analysis, write_scenario)
from .mdp_engine import (Mdp, ReachQuery, avoid_prob, fit_transitions, read_mdp,
                         read_policy_csv, reach_prob, resolve_states, synth_prob_shield,
                         write_mdp, write_policy_csv, write_prob_shield_csv)
from .safety_game import (GameGraph, controllability_values, determinize_max_fitness,
                          read_game, robustness_values, solve_delayed, winning_region, write_game,
                          write_strategy_csv)

OUTPUT_ENV = "SHIELDKIT_OUTPUT_DIR"
EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    """Argument errors count as invalid configuration (exit code 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidConfig(message)


def emit(summary: dict, stream=None) -> None:
    """Print a summary block with one ``key=value`` line per entry."""
    stream = stream or sys.stdout
    print("[summary]", file=stream)
    for k, v in summary.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, tuple)):
            v = " ".join(str(x) for x in v)
        print(f"{k}={v}", file=stream)
    print("[end]", file=stream)


def parse_summary(text: str) -> dict[str, str]:
    """Inverse of :func:`emit` for the first block in ``text``."""
    out, inside = {}, False
    for line in text.splitlines():
        if line == "[summary]":
            inside = True
        elif line == "[end]" and inside:
            break
        elif inside and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _out_dir(args) -> Path:
    d = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _positive(name, value, allow_zero=False):
    if value is None:
        return
    if value < 0 or (value == 0 and not allow_zero):
        raise InvalidConfig(f"--{name} must be {'nonnegative' if allow_zero else 'positive'}")


# --------------------------------------------------------------------------
# model loading

GAME_BUILDERS = ("gridworld", "dead-end", "car-car", "car-pedestrian")


def _add_game_args(p):
    p.add_argument("--game", help="game file in the line format")
    p.add_argument("--builder", choices=GAME_BUILDERS, help="built-in game instead of a file")
    p.add_argument("--n", type=int, default=2, help="dead-end pairs of the chase gridworld")
    p.add_argument("--robot-actions", choices=("basic", "rich"), default="basic")
    p.add_argument("--p-max", type=float, default=100.0)
    p.add_argument("--p-step", type=float, default=2.0)
    p.add_argument("--v-max", type=int, default=20)


def _crossing_spec(args) -> models.CrossingSpec:
    init = (args.p_max, min(10, args.v_max), args.p_max, min(10, args.v_max))
    return models.CrossingSpec(p_max=args.p_max, p_step=args.p_step, v_max=args.v_max,
                               initial=init, ped_initial=args.p_max / 2)


def _load_game(args) -> GameGraph:
    if bool(args.game) == bool(args.builder):
        raise InvalidConfig("give exactly one of --game and --builder")
    if args.game:
        return read_game(args.game)
    if args.builder == "gridworld":
        return models.build_gridworld(models.example_gridworld_spec())
    if args.builder == "dead-end":
        return models.build_gridworld(models.dead_end_spec(args.n, args.robot_actions))
    return models.build_crossing_game(_crossing_spec(args), args.builder)


def _read_mdp(path) -> Mdp:
    try:
        return read_mdp(path)
    except OSError as exc:
        raise InvalidConfig(f"cannot read {path}: {exc.strerror}") from exc


# --------------------------------------------------------------------------
# safety games

def cmd_solve_game(args) -> dict:
    game = _load_game(args)
    win_env, win_ag = winning_region(game)
    out = _out_dir(args) / "winning.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["player", "state", "winning"])
        for s, v in enumerate(win_env):
            w.writerow(["env", s, int(v)])
        for s, v in enumerate(win_ag):
            w.writerow(["ag", s, int(v)])
    return {"env_states": game.n_env, "agent_states": game.n_ag,
            "winning_env": int(win_env.sum()), "winning_agent": int(win_ag.sum()),
            "initial_winning": bool(win_env[game.initial]), "output": str(out)}


def _fitness(game, kind, memory, delay_max):
    if kind == "robustness":
        return robustness_values(game)
    return controllability_values(game, memory, delay_max)


def cmd_synth_delayed_shield(args) -> dict:
    _positive("delay", args.delay, allow_zero=True)
    memory = args.delay if args.memory is None else args.memory
    if not 0 <= memory <= args.delay:
        raise InvalidConfig("--memory must lie in [0, delay]")
    game = _load_game(args)
    strat = solve_delayed(game, args.delay, memory)
    winning = bool(strat.win_env[game.initial]) if args.delay == 0 else bool(strat.allowed(None, ()))
    d = _out_dir(args)
    out = d / "strategy.csv"
    write_strategy_csv(strat, out)
    summary = {"delay": args.delay, "memory": memory, "agent_states": game.n_ag,
               "controllable_states": int(strat.controllable().sum()),
               "initial_winning": winning, "strategy": str(out)}
    if args.determinize:
        fit = _fitness(game, args.determinize, memory, args.delay_max)
        det = determinize_max_fitness(strat, fit, game)
        post = d / "post_shield.csv"
        with open(post, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "register", "action"])
            for s in range(game.n_ag):
                for reg in strat.registers():
                    if strat.allowed_mask(s, reg):
                        w.writerow([s, " ".join(map(str, reg)), det.choose(s, reg)])
        summary["post_shield"] = str(post)
    if not winning:
        emit(summary)
        raise InfeasibleSynthesis("initial state is not winning under this delay and memory")
    return summary


def cmd_fitness(args) -> dict:
    game = _load_game(args)
    fit = _fitness(game, args.kind, args.memory, args.delay_max)
    out = _out_dir(args) / f"{args.kind}.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "value"])
        for s, v in enumerate(fit.values):
            w.writerow([s, int(v)])
    vals = np.asarray(fit.values)
    return {"kind": args.kind, "agent_states": game.n_ag, "min": int(vals.min()),
            "max": int(vals.max()), "output": str(out)}


# --------------------------------------------------------------------------
# MDPs

def cmd_mdp_reach(args) -> dict:
    m = _read_mdp(args.model)
    target = resolve_states(m, args.target)
    policy = read_policy_csv(args.policy, m) if args.policy else None
    if args.mode == "policy" and policy is None:
        raise InvalidConfig("--mode policy needs --policy")
    q = ReachQuery(target, args.horizon, args.mode, policy, None, args.tolerance)
    values = avoid_prob(m, q) if args.avoid else reach_prob(m, q)
    out = _out_dir(args) / ("avoid.csv" if args.avoid else "reach.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "value"])
        for s, v in enumerate(values):
            w.writerow([m.state_names[s] if m.state_names else s, repr(float(v))])
    states = resolve_states(m, args.state) if args.state else [0]
    summary = {"quantity": "avoid" if args.avoid else "reach", "mode": args.mode,
               "horizon": "inf" if args.horizon is None else args.horizon}
    for s in states:
        name = m.state_names[s] if m.state_names else str(s)
        summary[f"value.{name}"] = float(values[s])
    summary["output"] = str(out)
    return summary


def cmd_synth_prob_shield(args) -> dict:
    m = _read_mdp(args.model)
    unsafe = resolve_states(m, args.unsafe)
    table = synth_prob_shield(m, unsafe, args.threshold, args.horizon, args.mode)
    out = _out_dir(args) / "prob_shield.csv"
    write_prob_shield_csv(table, m, out)
    allowed = table.allowed & m.enabled
    return {"threshold": args.threshold, "mode": args.mode,
            "allowed_pairs": int(allowed.sum()), "enabled_pairs": int(m.enabled.sum()),
            "states_without_allowed": int((~allowed.any(axis=1)).sum()), "output": str(out)}


def cmd_fit_transitions(args) -> dict:
    samples = models.load_car_samples() if args.samples is None else _read_samples(args.samples)
    actions = [float(a) for a in args.actions.split(",")]
    vels = [float(v) for v in args.velocities.split(",")]
    fitted = fit_transitions(samples, actions, vels, args.mu_pos, args.mu_vel)
    d = _out_dir(args)
    cells = d / "fitted_cells.csv"
    with open(cells, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["action", "velocity", "gamma", "dV", "probability"])
        for i, a in enumerate(fitted.actions):
            for j, v in enumerate(fitted.velocities):
                for dV, p in fitted.dv_dist[i][j].items():
                    w.writerow([repr(float(a)), repr(float(v)), repr(float(fitted.gamma[i, j])),
                                dV, repr(float(p))])
    m = fitted.to_mdp(args.x_max, args.v_max)
    model = d / "car.mdp"
    write_mdp(m, model)
    return {"samples": len(samples), "actions": len(actions), "velocities": len(vels),
            "mean_gamma": float(np.mean(fitted.gamma)), "states": m.n_states,
            "cells": str(cells), "model": str(model)}


def _read_samples(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            return [(float(r["speed"]), float(r["command"]), float(r["dx"]), float(r["dv"]))
                    for r in reader]
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidConfig(f"cannot read samples from {path}: {exc}") from exc


# --------------------------------------------------------------------------
# fairness

def _read_dist(path):
    try:
        return fs.read_distribution_csv(path)
    except OSError as exc:
        raise InvalidConfig(f"cannot read {path}: {exc.strerror}") from exc


def _bounds(args):
    if args.lower is None or args.upper is None:
        raise InvalidConfig("welfare bounds need --lower and --upper")
    return args.lower, args.upper


def cmd_synth_fairness_shield(args) -> dict:
    _positive("T", args.T)
    theta = _read_dist(args.dist)
    if args.variant == "static-bw":
        lo, hi = _bounds(args)
        table = fs.synth_static_bw(theta, lo, hi, args.T, args.prop)
    elif args.variant == "dynamic":
        prefix = tuple(int(x) for x in args.prefix.split(",")) if args.prefix else None
        table = fs.synth_dynamic(theta, args.prop, args.kappa, args.T, prefix)
    elif args.variant == "static-fair":
        table = fs.synth_static_fair(theta, args.prop, args.kappa, args.T)
    else:
        table = fs.synth_finhzn(theta, args.prop, args.kappa, args.T)
    d = _out_dir(args)
    path = d / "fairness_shield.npz"
    fs.save_table(table, path)
    rows = fs.export_table_csv(table, d / "fairness_shield.csv", args.max_rows)
    summary = {"variant": args.variant, "property": table.kind, "threshold": table.threshold,
               "horizon": table.horizon, "root_expected_cost": float(table.root_value),
               "feasible": table.feasible, "table": str(path), "csv_rows": rows}
    if not table.feasible:
        emit(summary)
        raise InfeasibleSynthesis("no shield satisfies the property over this horizon")
    return summary


def cmd_run_periodic(args) -> dict:
    _positive("T", args.T)
    _positive("periods", args.periods)
    theta = _read_dist(args.dist)
    bounds = _bounds(args) if args.variant == "static-bw" else None
    run = fs.run_periodic(args.variant, theta, args.prop, args.kappa, args.T, args.periods,
                          args.seed, bounds)
    out = _out_dir(args) / "periodic.csv"
    run.write_csv(out)
    return {"variant": args.variant, "property": args.prop, "periods": args.periods,
            "final_bias": float(run.bias[-1]), "max_period_bias": float(max(run.period_bias)),
            "max_cumulative_bias": float(max(run.bias)), "total_cost": float(sum(run.cost)),
            "assumption_violations": int(sum(not a for a in run.assumption)),
            "output": str(out)}


# --------------------------------------------------------------------------
# gridworld simulation

def cmd_simulate_gridworld(args) -> dict:
    _positive("steps", args.steps)
    _positive("runs", args.runs)
    spec = models.dead_end_spec(args.n, args.robot_actions)
    shield = models.prepare_gridworld_shield(spec, args.delay, args.shield, args.delay_max)
    d = _out_dir(args)
    out = d / "gridworld_runs.csv"
    runs = []
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "score", "interventions", "violations", "steps"])
        for k in range(args.runs):
            seed = args.seed + k
            r = models.simulate_gridworld(shield, args.steps, seed, args.chase_prob,
                                          args.greedy_prob, record=(k == 0 and args.log))
            if k == 0 and args.log:
                models.write_gridworld_log(r, d / "gridworld_log.csv")
            w.writerow([k, seed, r.score, r.interventions, r.violations, r.steps])
            runs.append(r)
    return {"n": args.n, "delay": args.delay, "shield": args.shield, "runs": args.runs,
            "steps": args.steps, "mean_score": float(np.mean([r.score for r in runs])),
            "mean_interventions": float(np.mean([r.interventions for r in runs])),
            "violations": int(sum(r.violations for r in runs)), "output": str(out)}


# --------------------------------------------------------------------------
# intention

def _file_instance(assignment, m, policy):
    return ScenarioInstance(m, policy, _single_state)


def _single_state(step):
    if len(step) != 1:
        raise InvalidConfig("file-based scenarios use one state id per trace step")
    return int(step[0])


def _scenario_builder(sc: FactoredScenario, base: Path, spec: models.TrafficSpec):
    if sc.model == "traffic":
        return models.traffic_builder(spec, sc.policy or "opportunistic")
    if any(not p.fixed for p in sc.peripherals):
        raise InvalidConfig("file-based scenarios cannot vary peripheral variables")
    m = _read_mdp(base / sc.model)
    if not sc.policy:
        raise InvalidConfig("file-based scenarios need a policy file")
    pol = read_policy_csv(base / sc.policy, m)
    return functools.partial(_file_instance, m=LabeledMdp.from_mdp(m), policy=pol)


def cmd_analyze_intention(args) -> dict:
    d = _out_dir(args)
    spec = models.TrafficSpec(collision=args.collision)
    if args.scenario:
        sc = read_scenario(args.scenario)
        base = Path(args.scenario).parent
        if args.policy:
            sc = FactoredScenario(sc.model, sc.goal, sc.integral, sc.peripherals, sc.trace,
                                  args.policy)
    else:
        sc = models.traffic_reference_scenario(spec, args.policy or "opportunistic",
                                               seed=args.seed)
        base = d
        write_scenario(sc, d / "scenario.txt")
    if sc.model == "traffic":
        spec = spec.with_peripherals(sc.reference)
    builder = _scenario_builder(sc, base, spec)
    th = EvidenceThresholds(args.rho_low, args.rho_high, args.sigma_min)
    report = retrospective_analysis(builder, sc, th, args.batch, args.max_counterfactuals,
                                    args.seed, workers=args.workers,
                                    stop_early=not args.full_budget)
    out = d / "intention.csv"
    report.write_csv(out)
    summary = {"model": sc.model, "policy": sc.policy, "trace_length": len(sc.trace)}
    summary.update({k: ("none" if v is None else v) for k, v in report.summary().items()})
    summary["sigma_history"] = [f"{s:.6f}" for _, s, _ in report.history]
    summary["output"] = str(out)
    return summary


# --------------------------------------------------------------------------
# model export

MODEL_KINDS = ("gridworld", "dead-end", "car-car", "car-pedestrian", "car-pedestrian-mdp",
               "traffic", "counterexample")


def cmd_build_model(args) -> dict:
    d = _out_dir(args)
    if args.v_max is None:
        args.v_max = 10 if args.kind == "car-pedestrian-mdp" else 20
    if args.kind in GAME_BUILDERS:
        args.game, args.builder = None, args.kind
        game = _load_game(args)
        out = d / f"{args.kind}.game"
        write_game(game, out)
        return {"kind": args.kind, "env_states": game.n_env, "agent_states": game.n_ag,
                "env_edges": int(game.env_dst.size), "output": str(out)}
    if args.kind == "counterexample":
        m = models.counterexample_mdp(args.eps, args.delta)
    elif args.kind == "car-pedestrian-mdp":
        m = models.build_car_pedestrian_mdp(args.persona, args.x_max, args.v_max)
    else:
        spec = models.TrafficSpec(sl_init=args.sl_init, sl_end=args.sl_end, sl_fact=args.sl_fact,
                                  h_fact=args.h_fact, vis=args.vis, collision=args.collision)
        lm = models.build_traffic_mdp(spec)
        m = lm.base
        labels = {k: np.flatnonzero(v) for k, v in lm.valuation.items()}
        m = Mdp(m.n_states, m.n_actions, m.pair_state, m.pair_action, m.state_ptr, m.P,
                labels, None, m.action_names)
        restr = d / "traffic_restriction.csv"
        with open(restr, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "action"])
            for s, a in zip(*np.nonzero(~lm.restriction)):
                w.writerow([int(s), int(a)])
        pol = models.traffic_policy(spec, args.policy, lm.restriction)
        write_policy_csv(pol, d / f"traffic_policy_{args.policy}.csv")
    out = d / f"{args.kind}.mdp"
    write_mdp(m, out)
    return {"kind": args.kind, "states": m.n_states, "pairs": int(m.pair_state.size),
            "transitions": int(m.P.nnz), "output": str(out)}


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shieldkit", description="Shield synthesis and analysis toolkit.")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve-game", help="winning region of a safety game")
    _add_game_args(s)
    s.set_defaults(func=cmd_solve_game)

    s = sub.add_parser("synth-delayed-shield", help="maximally permissive delayed strategy")
    _add_game_args(s)
    s.add_argument("--delay", type=int, required=True)
    s.add_argument("--memory", type=int)
    s.add_argument("--determinize", choices=("robustness", "controllability"))
    s.add_argument("--delay-max", type=int, default=3)
    s.set_defaults(func=cmd_synth_delayed_shield)

    s = sub.add_parser("fitness", help="robustness or controllability values")
    _add_game_args(s)
    s.add_argument("kind", choices=("robustness", "controllability"))
    s.add_argument("--memory", type=int, default=0)
    s.add_argument("--delay-max", type=int, default=3)
    s.set_defaults(func=cmd_fitness)

    s = sub.add_parser("mdp-reach", help="reach or avoid probabilities")
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True, help="state ids, names or labels (comma separated)")
    s.add_argument("--mode", choices=("max", "min", "policy"), default="max")
    s.add_argument("--policy", help="policy CSV state,action,probability")
    s.add_argument("--horizon", type=int)
    s.add_argument("--tolerance", type=float, default=1e-10)
    s.add_argument("--avoid", action="store_true")
    s.add_argument("--state", help="states to report in the summary (default 0)")
    s.set_defaults(func=cmd_mdp_reach)

    s = sub.add_parser("synth-prob-shield", help="threshold shield on an MDP")
    s.add_argument("--model", required=True)
    s.add_argument("--unsafe", required=True)
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--mode", choices=("relative", "absolute"), default="relative")
    s.set_defaults(func=cmd_synth_prob_shield)

    s = sub.add_parser("synth-fairness-shield", help="fairness shield for one horizon")
    s.add_argument("variant", choices=("finhzn", "static-fair", "static-bw", "dynamic"))
    s.add_argument("--dist", required=True, help="input distribution CSV")
    s.add_argument("--prop", choices=fs.PROPERTIES, default="dp")
    s.add_argument("--kappa", type=float, default=0.1)
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--lower", type=float)
    s.add_argument("--upper", type=float)
    s.add_argument("--prefix", help="history counters na,na1,nb,nb1 (dynamic)")
    s.add_argument("--max-rows", type=int, default=100000)
    s.set_defaults(func=cmd_synth_fairness_shield)

    s = sub.add_parser("run-periodic", help="periodic fairness shielding run")
    s.add_argument("variant", choices=("static-fair", "static-bw", "dynamic"))
    s.add_argument("--dist", required=True)
    s.add_argument("--prop", choices=("dp", "eqopp"), default="dp")
    s.add_argument("--kappa", type=float, default=0.1)
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--periods", type=int, default=1)
    s.add_argument("--lower", type=float)
    s.add_argument("--upper", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_run_periodic)

    s = sub.add_parser("simulate-gridworld", help="treasure hunt under a delayed shield")
    s.add_argument("--n", type=int, default=2)
    s.add_argument("--delay", type=int, default=0)
    s.add_argument("--shield", choices=models.SHIELD_KINDS, default="pre")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--runs", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--robot-actions", choices=("basic", "rich"), default="basic")
    s.add_argument("--delay-max", type=int, default=3)
    s.add_argument("--chase-prob", type=float, default=0.7)
    s.add_argument("--greedy-prob", type=float, default=0.9)
    s.add_argument("--log", action="store_true", help="write the per-step log of the first run")
    s.set_defaults(func=cmd_simulate_gridworld)

    s = sub.add_parser("analyze-intention", help="retrospective intention analysis")
    s.add_argument("--scenario", help="scenario file (default: built-in traffic scenario)")
    s.add_argument("--policy", help="driver policy of the traffic model (overrides the scenario)")
    s.add_argument("--batch", type=int, default=5)
    s.add_argument("--max-counterfactuals", type=int, default=20)
    s.add_argument("--full-budget", action="store_true",
                   help="keep sampling after a conclusive verdict")
    s.add_argument("--rho-low", type=float, default=0.25)
    s.add_argument("--rho-high", type=float, default=0.75)
    s.add_argument("--sigma-min", type=float, default=0.5)
    s.add_argument("--collision", choices=("and", "or"), default="and")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze_intention)

    s = sub.add_parser("fit-transitions", help="fit car dynamics from samples")
    s.add_argument("--samples", help="CSV speed,command,dx,dv (default: bundled samples)")
    s.add_argument("--actions", default=",".join(str(a) for a in models.DEFAULT_CAR_ACTIONS))
    s.add_argument("--velocities", default=",".join(str(v) for v in models.DEFAULT_REF_VELOCITIES))
    s.add_argument("--mu-pos", type=float, default=0.5)
    s.add_argument("--mu-vel", type=float, default=0.5)
    s.add_argument("--x-max", type=int, default=40)
    s.add_argument("--v-max", type=int, default=20)
    s.set_defaults(func=cmd_fit_transitions)

    s = sub.add_parser("build-model", help="export a built-in model")
    s.add_argument("kind", choices=MODEL_KINDS)
    s.add_argument("--n", type=int, default=2)
    s.add_argument("--robot-actions", choices=("basic", "rich"), default="basic")
    s.add_argument("--p-max", type=float, default=100.0)
    s.add_argument("--p-step", type=float, default=2.0)
    s.add_argument("--v-max", type=int, help="speed grid (default 20, or 10 for the product MDP)")
    s.add_argument("--x-max", type=int, default=30)
    s.add_argument("--persona", choices=tuple(models.PEDESTRIAN_SIGMA), default="adult")
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--sl-init", type=float, default=20.0)
    s.add_argument("--sl-end", type=float, default=45.0)
    s.add_argument("--sl-fact", type=float, default=2.5)
    s.add_argument("--h-fact", type=float, default=0.5)
    s.add_argument("--vis", type=int, default=1)
    s.add_argument("--collision", choices=("and", "or"), default="and")
    s.add_argument("--policy", choices=models.TRAFFIC_POLICIES, default="opportunistic")
    s.set_defaults(func=cmd_build_model)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        summary = args.func(args)
    except InfeasibleSynthesis as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ShieldkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
