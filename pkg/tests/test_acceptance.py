"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py``.  Every check returns ``(ok, detail)``;
the pytest wrappers print the line and then assert ``ok``.
"""

from __future__ import annotations

import itertools
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import memory_separating_game, random_mdp, random_small_game, random_theta  # noqa: E402
from oracles import delayed_oracle, fairness_tree_oracle  # noqa: E402
from shieldkit import (EvidenceThresholds, LabeledMdp, Policy, ReachQuery,  # noqa: E402
                       avoidance_duals, balance_probability, balance_threshold,
                       balanced_trace_exists, controllability_values, determinize_max_fitness,
                       dynamic_assumption_holds, eval_property, expected_fitness,
                       forward_multiset, keep_above_sequence, reach_prob, reach_profile,
                       replay_stream, retrospective_analysis, robustness_values, run_periodic,
                       solve_delayed, synth_finhzn, synth_prob_shield, update_counters, verdict,
                       zero_counters)
from shieldkit.models import (GridLayout, build_gridworld, counterexample_mdp,  # noqa: E402
                              counterexample_reach, dead_end_spec, example_gridworld_spec,
                              prepare_gridworld_shield, simulate_gridworld, TrafficSpec,
                              traffic_builder, traffic_reference_scenario)


def _line(name: str, ok: bool, detail: str, seconds: float) -> str:
    return f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{seconds:.1f}s]"


# --------------------------------------------------------------------------
# 1. finite-horizon fairness shield optimality

def _reachable_final_counters(table, theta):
    """Counters reachable at the horizon under the shield.

    Forward exploration over counter sets covers every input trace, since
    the shield's decision depends only on the step, the counters and the input.
    """
    kind = table.kind
    atoms = [j for j in range(len(theta)) if theta.prob[j] > 0]
    layer = {zero_counters(kind)}
    for t in range(table.horizon):
        nxt = set()
        for c in layer:
            for j in atoms:
                g, r, cost = theta.atom(j)
                y = table.decision(t, c, g, r, cost)
                if kind == "eqopp":
                    q = float(theta.p_z1[j])
                    for z in (0, 1):
                        if (q if z else 1 - q) > 0:
                            nxt.add(update_counters(kind, c, g, y, z))
                else:
                    nxt.add(update_counters(kind, c, g, y))
        layer = nxt
    return layer


def check_finhzn_optimality():
    worst, configs, traces, infeasible = 0.0, 0, 0, 0
    bad_traces = 0
    for kind, kappa in (("dp", 0.2), ("eqopp", 0.2), ("di", 0.8)):
        for T in range(1, 6):
            for n_costs in (1, 2):
                rng = np.random.default_rng(1000 * T + 10 * n_costs + len(kind))
                for _ in range(20):
                    theta = random_theta(rng, n_costs, kind == "eqopp")
                    table = synth_finhzn(theta, kind, kappa, T)
                    oracle = fairness_tree_oracle(theta, kind, kappa, T)
                    configs += 1
                    if math.isinf(oracle) or math.isinf(table.root_value):
                        infeasible += 1
                        if not (math.isinf(oracle) and math.isinf(table.root_value)):
                            worst = math.inf
                        continue
                    worst = max(worst, abs(table.root_value - oracle))
                    for c in _reachable_final_counters(table, theta):
                        traces += 1
                        if eval_property(kind, c) > kappa + 1e-12:
                            bad_traces += 1
    ok = worst <= 1e-9 and bad_traces == 0
    return ok, (f"{configs} configurations ({infeasible} infeasible on both sides), "
                f"max |DP - oracle| = {worst:.2e}, {traces} final counter states, "
                f"{bad_traces} above threshold")


# --------------------------------------------------------------------------
# 2. static-fair replay counterexample

def check_static_fair_replay():
    tau1 = [(0, 0)] + [(1, 0)] * 9
    tau2 = [(0, 1)] * 9 + [(1, 1)]
    theta, stream = replay_stream(tau1 + tau2)
    run = run_periodic("static-fair", theta, "dp", 0.2, T=10, periods=2, inputs=stream)
    total = tuple(sum(c[i] for c in run.counters) for i in range(4))
    exact = abs(Fraction(total[1], total[0]) - Fraction(total[3], total[2]))
    ok = (run.period_bias == [0.0, 0.0] and exact == 1 - Fraction(2, 10)
          and abs(run.bias[-1] - 0.8) <= 1e-15)
    return ok, (f"per-period bias {run.period_bias}, cumulative counters {total}, "
                f"cumulative bias {exact} (float {run.bias[-1]!r})")


# --------------------------------------------------------------------------
# 3. welfare-bound machinery

def check_welfare_bounds():
    rng = np.random.default_rng(3)
    viol = pairs = 0
    while pairs < 50:
        lo = float(rng.uniform(0, 0.9))
        hi = float(rng.uniform(lo, 1.0))
        if hi - lo < 0.02:
            continue
        pairs += 1
        for n in range(math.ceil(1 / (hi - lo)), 101):
            x = keep_above_sequence(lo, n)
            x_next = keep_above_sequence(lo, n + 1)
            if (x != math.ceil(lo * n - 1e-12) or not lo - 1e-12 <= x / n <= hi + 1e-12
                    or x_next - x not in (0, 1)):
                viol += 1
    worst = 0.0
    for _ in range(200):
        T = int(rng.integers(1, 60))
        p = float(rng.uniform(0, 1))
        N = int(rng.integers(0, T // 2 + 2))
        direct = sum(math.comb(T, k) * p ** k * (1 - p) ** (T - k) for k in range(N, T - N + 1))
        worst = max(worst, abs(balance_probability(T, p, N) - direct))
    N = balance_threshold(0.2, 0.4)
    none = not balanced_trace_exists(2, N)
    ok = viol == 0 and worst <= 1e-12 and none
    return ok, (f"50 bound pairs, {viol} sequence violations; balance probability max error "
                f"{worst:.1e}; T=2, l=0.2, u=0.4 needs N={N}, balanced trace exists: {not none}")


# --------------------------------------------------------------------------
# 4. dynamic-shield assumption

def check_dynamic_assumption():
    flagged = not dynamic_assumption_holds("dp", (2, 1, 98, 49), (0, 0, 100, 0), 0.1)
    kappa, runs, tried, worst = 0.2, 0, 0, 0.0
    rng = np.random.default_rng(4)
    while runs < 100 and tried < 1000:
        tried += 1
        theta = random_theta(rng, 2)
        run = run_periodic("dynamic", theta, "dp", kappa, T=8, periods=4, seed=tried)
        if not all(run.assumption):
            continue
        runs += 1
        worst = max(worst, max(run.bias))
    ok = flagged and runs == 100 and worst <= kappa + 1e-12
    return ok, (f"all-b suffix flagged: {flagged}; {runs} runs with the assumption at every "
                f"period (out of {tried}), max end-of-period bias {worst:.4f} <= {kappa}")


# --------------------------------------------------------------------------
# 5. delayed games against the reduction oracle

def check_delayed_games():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(200):
        g = random_small_game(rng)
        delay = int(rng.integers(1, 3))
        strat = solve_delayed(g, delay, delay)
        table, transient = delayed_oracle(g, delay)
        mismatches += sum(strat.allowed(s, reg) != a for (s, reg), a in table.items())
        mismatches += sum(strat.allowed(None, reg) != a for reg, a in transient.items())
    g = memory_separating_game()
    with_mem = solve_delayed(g, 1, 1)
    without = solve_delayed(g, 1, 0)
    separated = (bool(with_mem.allowed(None, ())) and bool(with_mem.allowed(0, (0,)))
                 and not without.allowed(0, ()) and not without.allowed(None, ()))
    ok = mismatches == 0 and separated
    return ok, (f"200 games, {mismatches} table mismatches; memory-separating game "
                f"winning at memory 1 and losing at memory 0: {separated}")


# --------------------------------------------------------------------------
# 6. robustness bound for controllable states

def check_robustness_bound():
    rng = np.random.default_rng(6)
    counter, checked = 0, 0
    for _ in range(500):
        g = random_small_game(rng)
        delay = int(rng.integers(0, 4))
        memory = int(rng.integers(0, delay + 1))
        strat = solve_delayed(g, delay, memory)
        r = robustness_values(g)
        for s in np.flatnonzero(strat.controllable()):
            checked += 1
            if not (r.is_unbounded(s) or r[s] >= delay - memory + 1):
                counter += 1
    return counter == 0, f"500 games, {checked} controllable states, {counter} counterexamples"


# --------------------------------------------------------------------------
# 7. gridworld spot values

def check_gridworld_spot_values():
    spec = example_gridworld_spec()
    g, lay = build_gridworld(spec), GridLayout(spec)
    names = list(g.action_names)
    L, U = names.index("L"), names.index("U")
    s = lay.cell_id(3, 4)
    strat = solve_delayed(g, 1, 1)
    ctrl = controllability_values(g, 3, 3)
    sizes = {y: sum(forward_multiset(g, s, (U, y), 2).values()) for y in (L, U)}
    scores = {y: expected_fitness(g, ctrl, s, (U, y), 2) for y in (L, U)}
    pick = names[determinize_max_fitness(strat, ctrl, g).choose(s, (U,))]
    spots = [int(ctrl[lay.cell_id(x, y)]) for x, y in ((5, 5), (6, 6), (7, 7), (7, 8))]
    ok = sizes[L] == 26 and pick == "L" and spots == [2, 2, 2, 2]
    return ok, (f"|F2| after L = {sizes[L]}, after U = {sizes[U]} (expected 26); "
                f"expected controllability L = {scores[L]}, U = {scores[U]} "
                f"(expected 74/26 vs 73/26); pick {pick} (expected L); "
                f"controllability at (5,5),(6,6),(7,7),(7,8) = {spots} (expected all 2)")


# --------------------------------------------------------------------------
# 8. MDP engine against the closed form

def _mixed_policy(p_a):
    pol = np.zeros((4, 2))
    pol[0] = [p_a, 1 - p_a]
    pol[1:, 0] = 1
    return Policy(pol)


def check_mdp_closed_form():
    grid = np.linspace(0.05, 0.95, 10)
    worst = 0.0
    for p_a, eps, delta in itertools.product(grid, grid, grid):
        m = counterexample_mdp(eps, delta)
        v = reach_prob(m, ReachQuery(m.labels["bad"], mode="policy", policy=_mixed_policy(p_a)))
        worst = max(worst, abs(v[0] - counterexample_reach(p_a, eps, delta)))
    wrong = 0
    levels = np.round(np.linspace(0.05, 0.95, 19), 10)
    for eps, lam in itertools.product(levels, levels):
        m = counterexample_mdp(eps, 0.1)
        table = synth_prob_shield(m, m.labels["bad"], lam)
        wrong += table.is_allowed(0, 0) != (eps >= lam)
    ok = worst <= 1e-6 and wrong == 0
    return ok, (f"1000 grid points, max |engine - closed form| = {worst:.1e}; "
                f"shield decisions disagreeing with eps >= lambda: {wrong}/{levels.size ** 2}")


# --------------------------------------------------------------------------
# 9. intention identities

def check_intention_identities():
    rng = np.random.default_rng(9)
    worst, states = 0.0, 0
    for _ in range(100):
        n = int(rng.integers(2, 10))
        m = random_mdp(rng, n, 3)
        lm = LabeledMdp(m, {"g": np.flatnonzero(rng.random(n) < 0.3)})
        choice = [int(rng.choice(m.pair_action[m.state_ptr[s]:m.state_ptr[s + 1]]))
                  for s in range(n)]
        pol = Policy.deterministic(choice, 3)
        prof = reach_profile(lm, "g", pol)
        for s in np.flatnonzero(prof.agency > 1e-9):
            sig2, rho2 = avoidance_duals(lm, pol, int(s), "g")
            worst = max(worst, abs(sig2 - prof.agency[s]), abs(rho2 - (1 - prof.quotient(int(s)))))
            states += 1
    th = EvidenceThresholds(0.25, 0.75, 0.5)
    got = [verdict(sigma, rho, th) for rho, sigma in ((0.73, 0.18), (0.86, 0.52), (0.14, 0.50))]
    want = ["insufficient", "intentional", "non-intentional"]
    ok = worst <= 1e-9 and got == want
    return ok, f"100 MDPs, {states} states, max dual error {worst:.1e}; verdicts {got}"


# --------------------------------------------------------------------------
# 10. trend reproductions

def check_gridworld_interventions():
    spec = dead_end_spec(2)
    means = []
    for d in range(4):
        shield = prepare_gridworld_shield(spec, d, "pre")
        means.append(float(np.mean([simulate_gridworld(shield, 2000, seed).interventions
                                    for seed in range(100)])))
    ok = all(a <= b for a, b in zip(means, means[1:]))
    return ok, "mean pre-shield interventions for delay 0..3 over 100 seeds: " + \
        ", ".join(f"{m:.1f}" for m in means)


def check_agency_trend():
    spec = TrafficSpec()
    scenario = traffic_reference_scenario(spec, "opportunistic")
    report = retrospective_analysis(traffic_builder(spec, "opportunistic"), scenario,
                                    EvidenceThresholds(0.25, 0.75, 0.5), batch=5,
                                    max_counterfactuals=15, seed=0, stop_early=False)
    sig = [h[1] for h in report.history]
    ok = all(a <= b + 1e-12 for a, b in zip(sig, sig[1:]))
    return ok, ("aggregated agency over |T| = " + ", ".join(str(h[0]) for h in report.history)
                + ": " + ", ".join(f"{x:.3f}" for x in sig)
                + f"; intention quotient {report.rho:.3f}, verdict {report.verdict}")


def check_fairness_scaling():
    rng = np.random.default_rng(10)
    theta = random_theta(rng, 2)
    Ts, times = (25, 50, 100, 200), []
    for T in Ts:
        t0 = time.perf_counter()
        synth_finhzn(theta, "dp", 0.1, T)
        times.append(time.perf_counter() - t0)
    slope = float(np.polyfit(np.log(Ts), np.log(times), 1)[0])
    return slope <= 5.5, ("synthesis seconds " + ", ".join(f"T={T}: {t:.3f}" for T, t in zip(Ts, times))
                          + f"; log-log slope {slope:.2f} (limit 5.5)")


CHECKS = [
    ("criterion 1 fairness DP optimality", check_finhzn_optimality, 120),
    ("criterion 2 static-fair replay", check_static_fair_replay, None),
    ("criterion 3 welfare-bound machinery", check_welfare_bounds, 10),
    ("criterion 4 dynamic-shield assumption", check_dynamic_assumption, 60),
    ("criterion 5 delayed games vs reduction", check_delayed_games, 120),
    ("criterion 6 robustness bound", check_robustness_bound, 120),
    ("criterion 7 gridworld spot values", check_gridworld_spot_values, None),
    ("criterion 8 MDP engine closed form", check_mdp_closed_form, 30),
    ("criterion 9 intention identities", check_intention_identities, 60),
    ("criterion 10a gridworld interventions vs delay", check_gridworld_interventions, 300),
    ("criterion 10b agency over counterfactual batches", check_agency_trend, 300),
    ("criterion 10c fairness synthesis scaling", check_fairness_scaling, 300),
]


def run_check(name, fn, limit):
    t0 = time.perf_counter()
    ok, detail = fn()
    seconds = time.perf_counter() - t0
    if limit is not None and seconds > limit:
        ok, detail = False, detail + f"; over the {limit}s budget"
    return ok, _line(name, ok, detail, seconds)


SLOW = {"criterion 10b agency over counterfactual batches"}


@pytest.mark.parametrize("name,fn,limit", [
    pytest.param(*c, id=c[0].split()[1], marks=[pytest.mark.slow] if c[0] in SLOW else [])
    for c in CHECKS])
def test_acceptance(name, fn, limit, capsys):
    ok, line = run_check(name, fn, limit)
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


if __name__ == "__main__":
    results = [run_check(*c) for c in CHECKS]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
