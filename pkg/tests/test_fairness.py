import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from conftest import random_theta
from oracles import fairness_tree_oracle, shielded_final_counters
from shieldkit import (FairnessProperty, InfeasibleState, InputDistribution,
                       InvalidConfig, InvalidInput, apply_shield, balance_probability,
                       balance_threshold, balanced_trace_exists, dynamic_assumption_holds,
                       eval_property, expected_cost, export_table_csv, keep_above_sequence,
                       load_table, read_distribution_csv, replay_stream, run_periodic,
                       save_table, synth_dynamic, synth_finhzn, synth_static_bw,
                       synth_static_fair, trace_cost, update_counters,
                       write_distribution_csv, zero_counters)


# --------------------------------------------------------------------------
# inputs, properties, costs

def test_distribution_validation():
    with pytest.raises(InvalidConfig):
        InputDistribution([0], [1], [1.0], [0.5])
    with pytest.raises(InvalidConfig):
        InputDistribution([2], [1], [1.0], [1.0])
    with pytest.raises(InvalidConfig):
        InputDistribution([0], [1], [-1.0], [1.0])
    with pytest.raises(InvalidConfig):
        InputDistribution([0], [1], [1.0], [1.0], p_z1=[1.5])


def test_distribution_csv_round_trip(tmp_path, rng):
    theta = random_theta(rng, eqopp=True)
    write_distribution_csv(theta, tmp_path / "d.csv")
    back = read_distribution_csv(tmp_path / "d.csv")
    for name in ("group", "rec", "cost", "prob", "p_z1"):
        assert np.array_equal(getattr(theta, name), getattr(back, name))
    (tmp_path / "bad.csv").write_text("group,cost\na,1\n")
    with pytest.raises(InvalidConfig):
        read_distribution_csv(tmp_path / "bad.csv")


def test_eval_property_examples():
    assert eval_property("dp", (24, 12, 24, 17)) == pytest.approx(5 / 24, abs=1e-15)
    assert eval_property("dp", (0, 0, 5, 3)) == 0.0
    assert eval_property("dp", (10, 9, 10, 1)) == pytest.approx(0.8, abs=1e-15)
    assert eval_property(FairnessProperty("di", 0.8), (4, 2, 4, 4)) == pytest.approx(0.5)
    assert eval_property("di", (4, 2, 4, 0)) == 0.0
    assert eval_property("eqopp", (2, 1, 2, 2, 3, 0)) == pytest.approx(0.5)
    with pytest.raises(InvalidInput):
        eval_property("dp", (1, 2, 0, 0))
    with pytest.raises(InvalidInput):
        eval_property("dp", (1, 1, 0))
    with pytest.raises(InvalidConfig):
        FairnessProperty("dp", -0.1)


def test_counter_updates():
    assert update_counters("dp", (0, 0, 0, 0), 0, 1) == (1, 1, 0, 0)
    assert update_counters("dp", (1, 1, 0, 0), 1, 0) == (1, 1, 1, 0)
    assert update_counters("eqopp", zero_counters("eqopp"), 1, 1, z=1) == (0, 0, 1, 1, 0, 0)
    assert update_counters("eqopp", zero_counters("eqopp"), 1, 1, z=0) == (0, 0, 0, 0, 1, 0)
    with pytest.raises(InvalidInput):
        update_counters("eqopp", zero_counters("eqopp"), 0, 1)


def test_trace_cost():
    assert trace_cost([1, 0, 1], [1, 0, 1], [5, 5, 5]) == 0.0
    assert trace_cost([1, 0, 1, 1], [0, 0, 0, 1], [0.3, 9, 0.7, 2]) == pytest.approx(1.0)
    assert trace_cost([1, 0, 1, 1], [0, 0, 0, 1], [0.3, 9, 0.7, 2], upto=2) == pytest.approx(0.3)
    with pytest.raises(InvalidInput):
        trace_cost([1], [1, 0], [1])
    with pytest.raises(InvalidInput):
        trace_cost([1], [1], [1], upto=3)


# --------------------------------------------------------------------------
# finite-horizon shields

def test_threshold_one_never_intervenes(rng):
    theta = random_theta(rng)
    table = synth_finhzn(theta, "dp", 1.0, 4)
    assert table.root_value == 0.0
    for t in range(4):
        dec = table.decision_table(t)
        assert np.all(dec == theta.rec[None, :])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.sampled_from(["dp", "di", "eqopp"]),
       st.sampled_from([0.0, 0.1, 0.25, 0.5]), st.integers(1, 2), st.booleans())
def test_dp_matches_trace_tree_oracle(seed, T, kind, kappa, n_costs, sparse):
    theta = random_theta(np.random.default_rng(seed), n_costs, kind == "eqopp", sparse)
    if kind == "di":
        kappa = 1 - kappa
    table = synth_finhzn(theta, kind, kappa, T)
    oracle = fairness_tree_oracle(theta, kind, kappa, T)
    if math.isinf(oracle):
        assert math.isinf(table.root_value)
    else:
        assert table.root_value == pytest.approx(oracle, abs=1e-9)
        assert expected_cost(table) == pytest.approx(table.root_value, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.sampled_from(["dp", "eqopp"]))
def test_every_shielded_trace_is_fair(seed, T, kind):
    theta = random_theta(np.random.default_rng(seed), 2, kind == "eqopp")
    kappa = 0.2
    table = synth_finhzn(theta, kind, kappa, T)
    assert table.feasible
    for c in shielded_final_counters(table, theta):
        assert eval_property(kind, c) <= kappa + 1e-12


def test_rejecting_everyone_keeps_every_finite_horizon_shield_feasible(rng):
    """Rejecting all candidates gives bias 0, so the root value is always finite."""
    for kind in ("dp", "di", "eqopp"):
        for T in (1, 3, 5):
            theta = random_theta(rng, eqopp=kind == "eqopp")
            table = synth_finhzn(theta, kind, 0.0, T, raise_infeasible=True)
            assert table.feasible


def test_forced_rejection_near_horizon():
    """(24,12,24,17) has bias 5/24 > 0.2; accepting one more group-b candidate
    makes it 0.22, so with one decision left the shield must reject."""
    theta = InputDistribution([0, 0, 1, 1], [0, 1, 0, 1], [1.0] * 4, [0.25] * 4)
    table = synth_finhzn(theta, "dp", 0.2, 49)
    c = (24, 12, 24, 17)
    assert eval_property("dp", (24, 12, 25, 18)) == pytest.approx(0.22)
    y, after = apply_shield(table, 48, c, group=1, rec=1, cost=1.0)
    assert y == 0 and after == (24, 12, 25, 17)
    assert table.value(48, c) > 0


def test_apply_shield_passes_allowed_recommendation(rng):
    theta = random_theta(rng)
    table = synth_finhzn(theta, "dp", 1.0, 3)
    y, c = apply_shield(table, 0, (0, 0, 0, 0), group=0, rec=1, cost=0.3)
    assert (y, c) == (1, (1, 1, 0, 0))


def test_apply_shield_infeasible_cell():
    """Welfare bounds [0.4, 0.6] need N = 5 per group; at t = 9 with five
    group-a candidates all rejected, a group-b candidate balances the trace
    with group-a welfare 0, so the cell has no fair continuation."""
    theta = InputDistribution([0, 1], [1, 1], [1.0, 1.0], [0.5, 0.5])
    table = synth_static_bw(theta, 0.4, 0.6, 10)
    assert table.feasible
    assert math.isinf(table.value(9, (5, 0, 4, 2)))
    with pytest.raises(InfeasibleState):
        apply_shield(table, 9, (5, 0, 4, 2), 1, 1, 1.0)
    with pytest.raises(InvalidInput):
        table.state_index(1, (0, 0, 0, 0))


def test_equal_counters_give_equal_decisions(rng):
    theta = random_theta(rng)
    table = synth_finhzn(theta, "dp", 0.2, 5)
    for _ in range(50):
        seq = [(int(rng.integers(2)), int(rng.integers(2))) for _ in range(3)]
        perm = [seq[i] for i in rng.permutation(3)]
        a = b = (0, 0, 0, 0)
        for (g1, y1), (g2, y2) in zip(seq, perm):
            a = update_counters("dp", a, g1, y1)
            b = update_counters("dp", b, g2, y2)
        assert a == b
        assert table.value(3, a) == table.value(3, b)
        for j in range(len(theta)):
            g, r, c = theta.atom(j)
            assert table.decision(3, a, g, r, c) == table.decision(3, b, g, r, c)


def test_monte_carlo_cost_within_three_standard_errors():
    rng = np.random.default_rng(7)
    theta = random_theta(rng)
    T = 4
    table = synth_finhzn(theta, "dp", 0.2, T)
    runs = 100_000
    na = np.zeros(runs, dtype=np.int64)
    na1 = np.zeros(runs, dtype=np.int64)
    nb1 = np.zeros(runs, dtype=np.int64)
    cost = np.zeros(runs)
    for t in range(T):
        lay = table._layout(t)
        dec = table.decision_table(t)
        j = theta.sample(rng, runs)
        y = dec[lay.index(na, na1, nb1), j]
        cost += np.where(y != theta.rec[j], theta.cost[j], 0.0)
        a = theta.group[j] == 0
        na += a
        na1 += a & (y == 1)
        nb1 += ~a & (y == 1)
    se = cost.std(ddof=1) / math.sqrt(runs)
    assert abs(cost.mean() - table.root_value) <= 3 * se


def test_table_save_load_and_export(tmp_path, rng):
    theta = random_theta(rng, eqopp=True)
    for kind in ("dp", "eqopp"):
        table = synth_finhzn(theta, kind, 0.3, 3)
        save_table(table, tmp_path / "t.npz")
        back = load_table(tmp_path / "t.npz")
        assert back.kind == kind and back.horizon == 3 and back.root_value == table.root_value
        for a, b in zip(table.values, back.values):
            assert np.array_equal(a, b)
        rows = export_table_csv(table, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert len(lines) == rows + 1
        assert export_table_csv(table, tmp_path / "t2.csv", max_rows=5) == 5


# --------------------------------------------------------------------------
# welfare bounds

def test_balance_threshold_and_sequence():
    assert balance_threshold(0.3, 0.5) == 5
    assert keep_above_sequence(0.3, 5) == 2
    assert balance_threshold(0.0, 1.0) == 1
    with pytest.raises(InvalidConfig):
        balance_threshold(0.5, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.95), st.floats(0.02, 1.0))
def test_keep_above_sequence_stays_in_bounds(lo, width):
    hi = min(1.0, lo + width)
    if hi - lo < 0.02:
        return
    N = balance_threshold(lo, hi)
    for n in range(N, 51):
        x = keep_above_sequence(lo, n)
        assert lo - 1e-12 <= x / n <= hi + 1e-12
        assert keep_above_sequence(lo, n + 1) - x in (0, 1)


def test_full_bounds_never_intervene(rng):
    theta = random_theta(rng)
    table = synth_static_bw(theta, 0.0, 1.0, 4)
    assert table.root_value == 0.0
    assert all(np.all(table.decision_table(t) == theta.rec[None, :]) for t in range(4))


def test_short_horizon_has_no_balanced_trace(rng):
    theta = random_theta(rng)
    assert balance_threshold(0.2, 0.4) == 5
    assert not balanced_trace_exists(2, 5)
    assert balanced_trace_exists(10, 5)
    table = synth_static_bw(theta, 0.2, 0.4, 2)
    assert table.root_value == 0.0
    assert all(np.all(table.decision_table(t) == theta.rec[None, :]) for t in range(2))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4))
def test_welfare_bound_shield_matches_oracle(seed, T):
    theta = random_theta(np.random.default_rng(seed), 1)
    table = synth_static_bw(theta, 0.3, 0.8, T)
    oracle = fairness_tree_oracle(theta, "dp", 1.0, T, base="bw", bounds=(0.3, 0.8))
    assert table.root_value == pytest.approx(oracle, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 20)), min_size=1, max_size=6),
       st.floats(0, 0.9), st.floats(0.05, 1.0))
def test_bounded_segments_concatenate_within_bounds(segments, lo, width):
    hi = min(1.0, lo + width)
    segs = [(n, min(k, n)) for n, k in segments]
    if not all(lo <= k / n <= hi for n, k in segs):
        return
    total = Fraction(sum(k for _, k in segs), sum(n for n, _ in segs))
    assert lo - 1e-12 <= total <= hi + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.lists(st.tuples(st.integers(0, 10),
       st.integers(0, 10)), min_size=1, max_size=5), st.floats(0, 1))
def test_equal_denominator_segments_keep_bias(na, nb, accepts, kappa):
    segs = [(na, min(a, na), nb, min(b, nb)) for a, b in accepts]
    if not all(eval_property("dp", s) <= kappa for s in segs):
        return
    total = tuple(sum(s[i] for s in segs) for i in range(4))
    assert eval_property("dp", total) <= kappa + 1e-12


def test_balance_probability():
    assert balance_probability(7, 0.3, 0) == pytest.approx(1.0)
    assert balance_probability(2, 0.5, 1) == pytest.approx(0.5)
    assert balance_probability(2, 0.5, 2) == 0.0
    for T, p, N in [(10, 0.3, 2), (25, 0.7, 5), (40, 0.5, 13)]:
        direct = sum(math.comb(T, k) * p ** k * (1 - p) ** (T - k) for k in range(N, T - N + 1))
        assert balance_probability(T, p, N) == pytest.approx(direct, abs=1e-12)
        assert balance_probability(T, p, N) == pytest.approx(
            binom.cdf(T - N, T, p) - binom.cdf(N - 1, T, p), abs=1e-12)
    with pytest.raises(InvalidConfig):
        balance_probability(3, 1.5, 1)


# --------------------------------------------------------------------------
# dynamic shields and periodic runs

def test_dynamic_with_empty_prefix_is_finite_horizon(rng):
    theta = random_theta(rng)
    a = synth_dynamic(theta, "dp", 0.2, 3)
    b = synth_finhzn(theta, "dp", 0.2, 3)
    for x, y in zip(a.values, b.values):
        assert np.array_equal(x, y)


def test_dynamic_assumption_example():
    prefix = (2, 1, 98, 49)
    suffix = (1, 0, 99, 0)
    assert not dynamic_assumption_holds("dp", prefix, suffix, 0.1)
    assert dynamic_assumption_holds("dp", (50, 25, 50, 25), (10, 5, 10, 5), 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.sampled_from([0.1, 0.3, 0.6]))
def test_dynamic_matches_prefix_conditioned_oracle(seed, T, kappa):
    rng = np.random.default_rng(seed)
    theta = random_theta(rng, 1)
    na, nb = int(rng.integers(1, 8)), int(rng.integers(1, 8))
    prefix = (na, int(rng.integers(0, na + 1)), nb, int(rng.integers(0, nb + 1)))
    table = synth_dynamic(theta, "dp", kappa, T, prefix)
    oracle = fairness_tree_oracle(theta, "dp", kappa, T, prefix=prefix, base="dynamic")
    if math.isinf(oracle):
        assert math.isinf(table.root_value)
    else:
        assert table.root_value == pytest.approx(oracle, abs=1e-9)


def _counterexample_stream(T=10):
    tau1 = [(0, 0)] + [(1, 0)] * 9
    tau2 = [(0, 1)] * 9 + [(1, 1)]
    return replay_stream(tau1 + tau2)


def test_static_fair_replay_counterexample():
    theta, stream = _counterexample_stream()
    run = run_periodic("static-fair", theta, "dp", 0.2, T=10, periods=2, inputs=stream)
    assert run.counters == [(1, 0, 9, 0), (9, 9, 1, 1)]
    assert run.period_bias == [0.0, 0.0]
    assert run.bias[-1] == pytest.approx(1 - 2 / 10, abs=1e-15)
    assert sum(run.cost) == 0.0


def test_dynamic_replay_fixes_counterexample():
    theta, stream = _counterexample_stream()
    run = run_periodic("dynamic", theta, "dp", 0.2, T=10, periods=2, inputs=stream)
    if run.assumption[1]:
        assert run.bias[-1] <= 0.2 + 1e-12
    assert run.bias[-1] < 0.8


def test_single_period_equals_finite_horizon_run(rng):
    theta = random_theta(rng)
    run = run_periodic("static-fair", theta, "dp", 0.2, T=5, periods=1, seed=3)
    table = synth_finhzn(theta, "dp", 0.2, 5)
    c = zero_counters("dp")
    for t, (k, g, r, cost, y, _) in enumerate(run.steps):
        y2, c = apply_shield(table, t, c, g, r, cost)
        assert y == y2
    assert run.counters[0] == c


def test_periodic_runs_are_seeded(rng):
    theta = random_theta(rng)
    a = run_periodic("dynamic", theta, "dp", 0.2, T=4, periods=3, seed=11)
    b = run_periodic("dynamic", theta, "dp", 0.2, T=4, periods=3, seed=11)
    assert a.steps == b.steps
    bw = run_periodic("static-bw", theta, "dp", T=4, periods=2, seed=1, bounds=(0.2, 0.8))
    assert len(bw.bias) == 2


def test_periodic_errors(rng, tmp_path):
    theta = random_theta(rng)
    with pytest.raises(InvalidConfig):
        run_periodic("dynamic", theta, "di", 0.9, T=2)
    with pytest.raises(InvalidConfig):
        synth_static_fair(theta, "di", 0.9, 2)
    with pytest.raises(InvalidConfig):
        run_periodic("static-bw", theta, "dp", T=2)
    with pytest.raises(InvalidConfig):
        run_periodic("weekly", theta, "dp", 0.2, T=2)
    with pytest.raises(InvalidConfig):
        run_periodic("static-fair", theta, "dp", 0.2, T=2, periods=0)
    with pytest.raises(InvalidInput):
        run_periodic("static-fair", theta, "dp", 0.2, T=2, periods=1, inputs=[0])
    run = run_periodic("static-fair", theta, "dp", 0.2, T=2, periods=2, seed=0)
    run.write_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().startswith("t,group,rec,cost,decision,bias")


def test_eqopp_periodic_run(rng):
    theta = random_theta(rng, eqopp=True)
    run = run_periodic("dynamic", theta, "eqopp", 0.3, T=3, periods=2, seed=5)
    assert len(run.counters) == 2 and len(run.counters[0]) == 6


def test_small_dp_table_size(rng):
    """The DP layer at time t holds exactly the counter vectors with n_a + n_b = t."""
    theta = random_theta(rng)
    table = synth_finhzn(theta, "dp", 0.2, 6)
    for t in range(7):
        expect = sum(1 for na in range(t + 1) for _ in range(na + 1) for _ in range(t - na + 1))
        assert table.values[t].size == expect
    assert list(itertools.islice(iter(table.values[0]), 1)) == [table.root_value]
