"""Shared helpers: random safety games, random MDPs and small fixed models."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shieldkit import GameGraph, InputDistribution, Mdp  # noqa: E402


def random_game(rng: np.random.Generator, n_env: int, n_ag: int, n_actions: int,
                p_unsafe: float = 0.2, p_disabled: float = 0.2,
                max_branch: int = 2) -> GameGraph:
    """Deadlock-free random bipartite game; state 0 of each kind is safe."""
    env_edges = []
    for e in range(n_env):
        k = int(rng.integers(1, max_branch + 1))
        for s in rng.choice(n_ag, size=min(k, n_ag), replace=False):
            env_edges.append((e, int(s)))
    agent_edges = []
    for s in range(n_ag):
        enabled = [a for a in range(n_actions) if rng.random() >= p_disabled]
        if not enabled:
            enabled = [int(rng.integers(n_actions))]
        for a in enabled:
            agent_edges.append((s, a, int(rng.integers(n_env))))
    unsafe_env = [e for e in range(1, n_env) if rng.random() < p_unsafe]
    unsafe_ag = [s for s in range(1, n_ag) if rng.random() < p_unsafe]
    return GameGraph.from_edges(n_env, n_ag, n_actions, env_edges, agent_edges,
                                unsafe_env, unsafe_ag, initial=0)


def random_small_game(rng: np.random.Generator, max_states: int = 8) -> GameGraph:
    """Random game with at most ``max_states`` states in total."""
    n_env = int(rng.integers(1, max_states // 2 + 1))
    n_ag = int(rng.integers(1, max_states - n_env + 1))
    return random_game(rng, n_env, n_ag, int(rng.integers(1, 4)))


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               max_succ: int = 3, p_disabled: float = 0.3) -> Mdp:
    """Random MDP with every state having at least one enabled action."""
    rows = []
    for s in range(n_states):
        enabled = [a for a in range(n_actions) if rng.random() >= p_disabled] or [0]
        for a in enabled:
            k = int(rng.integers(1, max_succ + 1))
            succ = rng.choice(n_states, size=min(k, n_states), replace=False)
            w = rng.random(len(succ)) + 0.05
            for t, p in zip(succ, w / w.sum()):
                rows.append((s, a, int(t), float(p)))
    return Mdp.from_transitions(n_states, n_actions, rows)


def random_theta(rng, n_costs=2, eqopp=False, sparse=False):
    """Random input distribution over both groups, both recommendations and
    ``n_costs`` cost levels, optionally with zero-probability atoms."""
    costs = [0.3, 1.0][:n_costs]
    atoms = [(g, r, c) for g in (0, 1) for r in (0, 1) for c in costs]
    p = rng.dirichlet(np.ones(len(atoms)))
    if sparse:
        p[rng.random(len(atoms)) < 0.3] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
        p = p / p.sum()
    rows = [a + (float(pp),) for a, pp in zip(atoms, p)]
    if eqopp:
        rows = [row + (float(rng.uniform(0.2, 0.9)),) for row in rows]
    return InputDistribution.from_rows(rows)


def memory_separating_game() -> GameGraph:
    """Agent state ``s`` (id 0) where action a leads to successors that must
    continue with a and action b to successors that must continue with b.

    Under delay 1 the agent observes ``s`` while already standing in one of
    the successors, so only its last action tells it what is safe.
    """
    # env: 0 initial -> s, 1 after a -> {1, 2}, 2 after b -> {3, 4, 5},
    # 3 back to s, 4 unsafe sink
    env_edges = [(0, 0), (1, 1), (1, 2), (2, 3), (2, 4), (2, 5), (3, 0), (4, 0)]
    a, b = 0, 1
    agent_edges = [(0, a, 1), (0, b, 2)]
    for s in (1, 2):
        agent_edges += [(s, a, 3), (s, b, 4)]
    for s in (3, 4, 5):
        agent_edges += [(s, a, 4), (s, b, 3)]
    return GameGraph.from_edges(5, 6, 2, env_edges, agent_edges, unsafe_env=[4],
                                initial=0, action_names=("a", "b"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
