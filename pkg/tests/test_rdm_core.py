import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldkit import (InfeasibleState, InvalidInput, InvalidPolicy, ObsActTrace, PostShield,
                       PreShield, ShieldDecision, decisions_equal, detect_interference,
                       induced_shields, table_pre_shield, transparent_shield)


def test_trace_rejects_ids_outside_alphabet():
    with pytest.raises(InvalidInput):
        ObsActTrace(((0, 3),), n_observations=2, n_actions=3)
    with pytest.raises(InvalidInput):
        ObsActTrace(((2, 0),), n_observations=2, n_actions=3)
    assert len(ObsActTrace((), 1, 1)) == 0


def test_decision_invariants():
    with pytest.raises(InvalidInput):
        ShieldDecision("pre")
    assert ShieldDecision("pre", infeasible=True).infeasible
    with pytest.raises(InvalidInput):
        ShieldDecision("post")
    with pytest.raises(InvalidInput):
        ShieldDecision("side", allowed=frozenset({0}))


def test_transparent_shields():
    post = transparent_shield(4, "post")
    assert post.correct((), 0, 3) == 3
    pre = transparent_shield(3, "pre")
    assert pre.allowed((), 7) == {0, 1, 2}
    with pytest.raises(InvalidInput):
        transparent_shield(0)
    with pytest.raises(InvalidInput):
        transparent_shield(2, "middle")


def test_interference_of_restrictive_pre_shield():
    shield = PreShield(lambda h, o: {0}, 2)
    trace = ObsActTrace(((0, 0), (1, 0), (0, 1)), 2, 2)
    got = detect_interference(shield, trace, [0, 0, 1])
    assert [(r.position, r.observation, r.action) for r in got] == [(2, 0, 1)]


def test_interference_length_mismatch():
    trace = ObsActTrace(((0, 0),), 1, 2)
    with pytest.raises(InvalidInput):
        detect_interference(transparent_shield(2), trace, [0, 1])


def test_induced_shields_deterministic_agent():
    pre, post = induced_shields(lambda h, o: 1, 3)
    assert pre.allowed((), 0) == {1}
    assert post.correct((), 0, 2) == 1


def test_induced_post_shield_uses_determinization():
    pre, post = induced_shields(lambda h, o: {0: 0.5, 1: 0.5}, 3)
    assert pre.allowed((), 0) == {0, 1}
    assert post.correct((), 0, 2) == 0
    assert post.correct((), 0, 1) == 1
    _, post_hi = induced_shields(lambda h, o: [0.5, 0.5, 0.0], 3,
                                 determinize=lambda h, o, sup: max(sup))
    assert post_hi.correct((), 0, 2) == 1


def test_induced_empty_support_is_invalid_policy():
    pre, _ = induced_shields(lambda h, o: [0.0, 0.0], 2)
    with pytest.raises(InvalidPolicy):
        pre.allowed((), 0)
    pre, _ = induced_shields(lambda h, o: {5: 1.0}, 2)
    with pytest.raises(InvalidPolicy):
        pre.allowed((), 0)


def test_post_shield_output_checked_against_alphabet():
    bad = PostShield(lambda h, o, a: 9, 3)
    with pytest.raises(InvalidInput):
        bad.correct((), 0, 0)


def _history_agent(n_obs, n_act, seed):
    """Deterministic pseudo-random agent whose support depends on the history."""

    def policy(history, obs):
        key = hash((seed, history, obs)) % (2 ** n_act - 1) + 1
        return {a: 1.0 for a in range(n_act) if key >> a & 1}

    return policy


@pytest.mark.parametrize("n_obs,n_act", [(1, 1), (2, 2), (3, 2), (2, 3)])
def test_induced_shields_never_interfere_with_own_agent(n_obs, n_act):
    """Exhaustive over all agent-feasible traces of length up to 5."""
    for seed in range(3):
        agent = _history_agent(n_obs, n_act, seed)
        pre, post = induced_shields(agent, n_act)
        frontier = [()]
        for _ in range(5):
            nxt = []
            for steps in frontier:
                for o in range(n_obs):
                    for a in sorted(agent(steps, o)):
                        ext = steps + ((o, a),)
                        trace = ObsActTrace(ext, n_obs, n_act)
                        props = [a2 for _, a2 in ext]
                        assert detect_interference(pre, trace, props) == []
                        assert detect_interference(post, trace, props) == []
                        nxt.append(ext)
            frontier = nxt[:400]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=8))
def test_transparent_shields_never_interfere(n_act, raw):
    steps = [(o, a % n_act) for o, a in raw]
    trace = ObsActTrace(steps, 4, n_act)
    props = [a for _, a in steps]
    for kind in ("pre", "post"):
        assert detect_interference(transparent_shield(n_act, kind), trace, props) == []


def test_decisions_equal_on_enumerated_inputs():
    a = transparent_shield(2, "post")
    _, b = induced_shields(lambda h, o: [0.5, 0.5], 2)
    inputs = list(itertools.product([()], [0, 1], [0, 1]))
    assert decisions_equal(a, b, inputs)
    _, c = induced_shields(lambda h, o: 0, 2)
    assert not decisions_equal(a, c, inputs)
    with pytest.raises(InvalidInput):
        decisions_equal(a, transparent_shield(2, "pre"), inputs)


def test_table_pre_shield_missing_key_is_infeasible():
    sh = table_pre_shield({((), 0): [1]}, 2)
    assert sh.allowed((), 0) == {1}
    with pytest.raises(InfeasibleState):
        sh.allowed((), 1)
    assert sh.decide((), 0).allowed == {1}
