"""Finite Markov decision processes: reachability and avoidance, products,
probabilistic shields and transition fitting from sampled dynamics.

An :class:`Mdp` stores its enabled state-action pairs in state order.  Row
``i`` of the sparse matrix ``P`` is the successor distribution of pair ``i``,
so one sparse product evaluates every action at once.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order
from scipy.sparse.linalg import bicgstab, spsolve
from scipy.stats import norm

from .errors import InvalidConfig, InvalidInput, InvalidPolicy, MissingData

TOLERANCE = 1e-10
MAX_SWEEPS = 10**6
PROB_TOL = 1e-9
DIRECT_LIMIT = 5000
POLISH_EVERY = 50
PI_MAX_ITER = 200
IMPROVE_TOL = 1e-12


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Mdp:
    """Sparse MDP.

    ``pair_state``/``pair_action`` list the enabled pairs sorted by state,
    ``state_ptr[s]:state_ptr[s+1]`` is the pair range of state ``s`` and
    ``P`` has one row per pair.
    """

    n_states: int
    n_actions: int
    pair_state: np.ndarray
    pair_action: np.ndarray
    state_ptr: np.ndarray
    P: sp.csr_matrix
    labels: Mapping[str, frozenset] = field(default_factory=dict)
    state_names: tuple[str, ...] | None = None
    action_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise InvalidConfig("an MDP needs at least one state and one action")
        if np.any(np.diff(self.state_ptr) < 1):
            raise InvalidConfig("every state needs at least one enabled action")
        P = self.P.tocsr()
        if P.nnz and (P.data.min() <= 0 or P.data.max() > 1 + PROB_TOL):
            raise InvalidConfig("transition probabilities must lie in (0, 1]")
        sums = np.asarray(P.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
        if bad.size:
            i = bad[0]
            raise InvalidConfig(
                f"distribution of state {self.pair_state[i]} action {self.pair_action[i]} "
                f"sums to {sums[i]!r}")
        for name, states in self.labels.items():
            if any(not 0 <= s < self.n_states for s in states):
                raise InvalidConfig(f"label {name!r} names a state outside the MDP")
        index = np.full((self.n_states, self.n_actions), -1, dtype=np.int64)
        index[self.pair_state, self.pair_action] = np.arange(self.pair_state.size)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "labels", {k: frozenset(int(s) for s in v)
                                            for k, v in self.labels.items()})
        object.__setattr__(self, "pair_index", _readonly(index))
        for name in ("pair_state", "pair_action", "state_ptr"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.int64)))

    @classmethod
    def from_transitions(cls, n_states: int, n_actions: int,
                         transitions: Mapping[tuple[int, int], Iterable[tuple[int, float]]]
                         | Iterable[tuple[int, int, int, float]],
                         labels: Mapping[str, Iterable[int]] | None = None,
                         state_names: Sequence[str] | None = None,
                         action_names: Sequence[str] | None = None) -> "Mdp":
        """Build from ``{(s, a): [(s', p), ...]}`` or rows ``(s, a, s', p)``.

        Repeated successors of one pair are summed.
        """
        rows: dict[tuple[int, int], dict[int, float]] = defaultdict(lambda: defaultdict(float))
        items = transitions.items() if isinstance(transitions, Mapping) else None
        if items is not None:
            for (s, a), succ in items:
                for t, p in succ:
                    rows[(int(s), int(a))][int(t)] += float(p)
        else:
            for s, a, t, p in transitions:
                rows[(int(s), int(a))][int(t)] += float(p)
        for (s, a), succ in rows.items():
            if not (0 <= s < n_states and 0 <= a < n_actions):
                raise InvalidConfig(f"pair ({s}, {a}) outside the declared ranges")
            if any(not 0 <= t < n_states for t in succ):
                raise InvalidConfig(f"pair ({s}, {a}) has a successor outside the MDP")
        keys = sorted(rows)
        pair_state = np.array([k[0] for k in keys], dtype=np.int64)
        pair_action = np.array([k[1] for k in keys], dtype=np.int64)
        indptr, indices, data = [0], [], []
        for k in keys:
            succ = sorted((t, p) for t, p in rows[k].items() if p != 0)
            indices.extend(t for t, _ in succ)
            data.extend(p for _, p in succ)
            indptr.append(len(indices))
        P = sp.csr_matrix((np.array(data, dtype=float), np.array(indices, dtype=np.int64),
                           np.array(indptr, dtype=np.int64)), shape=(len(keys), n_states))
        counts = np.bincount(pair_state, minlength=n_states)
        state_ptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(n_states, n_actions, pair_state, pair_action, state_ptr, P,
                   dict(labels or {}), tuple(state_names) if state_names else None,
                   tuple(action_names) if action_names else None)

    @classmethod
    def from_arrays(cls, n_states: int, n_actions: int, pair_state, pair_action,
                    P: sp.spmatrix, labels=None, state_names=None, action_names=None) -> "Mdp":
        """Build from pair arrays already sorted by state (fast path for large models)."""
        pair_state = np.asarray(pair_state, dtype=np.int64)
        if pair_state.size and np.any(np.diff(pair_state) < 0):
            raise InvalidConfig("pairs must be sorted by state")
        counts = np.bincount(pair_state, minlength=n_states)
        state_ptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(n_states, n_actions, pair_state, np.asarray(pair_action, dtype=np.int64),
                   state_ptr, sp.csr_matrix(P), dict(labels or {}), state_names, action_names)

    @property
    def enabled(self) -> np.ndarray:
        return self.pair_index >= 0

    def successors(self, s: int, a: int) -> list[tuple[int, float]]:
        i = self.pair_index[s, a]
        if i < 0:
            raise InvalidInput(f"action {a} is not enabled in state {s}")
        lo, hi = self.P.indptr[i], self.P.indptr[i + 1]
        return list(zip(self.P.indices[lo:hi].tolist(), self.P.data[lo:hi].tolist()))

    def label_mask(self, name: str) -> np.ndarray:
        if name not in self.labels:
            raise InvalidConfig(f"unknown label {name!r}")
        return state_mask(self, self.labels[name])


def state_mask(m: Mdp, states) -> np.ndarray:
    arr = np.asarray(states)
    if arr.dtype == bool:
        if arr.shape != (m.n_states,):
            raise InvalidConfig("state mask has the wrong length")
        return arr.copy()
    mask = np.zeros(m.n_states, dtype=bool)
    idx = np.fromiter((int(s) for s in states), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= m.n_states):
        raise InvalidConfig("target contains a state outside the MDP")
    mask[idx] = True
    return mask


@dataclass(frozen=True, eq=False)
class Policy:
    """Memoryless policy as an ``(n_states, n_actions)`` probability matrix."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2 or np.any(probs < 0):
            raise InvalidPolicy("policy must be a nonnegative state-by-action matrix")
        if np.any(np.abs(probs.sum(axis=1) - 1) > PROB_TOL):
            raise InvalidPolicy("policy rows must sum to one")
        object.__setattr__(self, "probs", _readonly(probs))

    @classmethod
    def deterministic(cls, choice: Sequence[int], n_actions: int) -> "Policy":
        choice = np.asarray(choice, dtype=np.int64)
        probs = np.zeros((choice.size, n_actions))
        probs[np.arange(choice.size), choice] = 1.0
        return cls(probs)

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0) | (self.probs == 1)))

    def choice(self) -> np.ndarray:
        if not self.is_deterministic:
            raise InvalidPolicy("policy is not deterministic")
        return np.argmax(self.probs, axis=1)

    def check(self, m: Mdp) -> None:
        if self.probs.shape != (m.n_states, m.n_actions):
            raise InvalidPolicy("policy shape does not match the MDP")
        if np.any((self.probs > 0) & ~m.enabled):
            s, a = np.argwhere((self.probs > 0) & ~m.enabled)[0]
            raise InvalidPolicy(f"policy picks disabled action {a} in state {s}")


@dataclass(frozen=True)
class ReachQuery:
    """Reachability query; ``horizon=None`` is unbounded.

    ``restriction`` is an optional boolean ``(n_states, n_actions)`` mask of
    actions the optimizing modes may use.
    """

    target: object
    horizon: int | None = None
    mode: str = "max"
    policy: Policy | None = None
    restriction: np.ndarray | None = None
    tolerance: float = TOLERANCE

    def __post_init__(self):
        if self.mode not in ("min", "max", "policy"):
            raise InvalidConfig(f"unknown mode {self.mode!r}")
        if self.mode == "policy" and self.policy is None:
            raise InvalidConfig("policy mode needs a policy")
        if self.horizon is not None and self.horizon < 0:
            raise InvalidConfig("horizon must be nonnegative")
        if self.horizon is None and not self.tolerance > 0:
            raise InvalidConfig("unbounded queries need a positive tolerance")


# --------------------------------------------------------------------------
# graph precomputation

def _pair_mask(m: Mdp, restriction) -> np.ndarray:
    if restriction is None:
        return np.ones(m.pair_state.size, dtype=bool)
    r = np.asarray(restriction, dtype=bool)
    if r.shape != (m.n_states, m.n_actions):
        raise InvalidConfig("restriction mask has the wrong shape")
    keep = r[m.pair_state, m.pair_action]
    has = np.logical_or.reduceat(keep, m.state_ptr[:-1])
    if not has.all():
        raise InvalidConfig(f"restriction leaves state {np.flatnonzero(~has)[0]} without actions")
    return keep


def _any_per_state(m, pair_flags):
    return np.logical_or.reduceat(pair_flags, m.state_ptr[:-1])


def _all_per_state(m, pair_flags, active):
    """For each state: all active pairs satisfy the flag."""
    return np.logical_and.reduceat(pair_flags | ~active, m.state_ptr[:-1])


def _pairs_touch(m, mask):
    """Pair has some successor in ``mask``."""
    return (m.P @ mask.astype(float)) > 0


def _pairs_within(m, mask):
    """Every successor of the pair lies in ``mask``."""
    return (m.P @ (~mask).astype(float)) == 0


def _backward_reach(m, seed, pair_ok, state_ok=None):
    """States that reach ``seed`` through pairs flagged in ``pair_ok``.

    A state joins when one of its flagged pairs has a successor already in
    the set; ``state_ok`` restricts which states may join.  One breadth-first
    search over the reversed state/pair graph.
    """
    n, n_pairs = m.n_states, m.pair_state.size
    ok = pair_ok.copy()
    if state_ok is not None:
        ok &= state_ok[m.pair_state]
    rows = np.repeat(np.arange(n_pairs), np.diff(m.P.indptr))
    edge = ok[rows]
    pairs = np.flatnonzero(ok)
    seeds = np.flatnonzero(seed)
    root = n + n_pairs
    src = np.concatenate([m.P.indices[edge], n + pairs, np.full(seeds.size, root)])
    dst = np.concatenate([n + rows[edge], m.pair_state[pairs], seeds])
    G = sp.csr_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(root + 1, root + 1))
    order = breadth_first_order(G, root, directed=True, return_predecessors=False)
    out = np.zeros(n, dtype=bool)
    out[order[order < n]] = True
    return out


def _prob0_max(m, target, active):
    """States from which no policy reaches the target."""
    return ~_backward_reach(m, target, active)


def _prob0_min(m, target, active):
    """States where some policy avoids the target forever."""
    z = ~target
    while True:
        new = z & _any_per_state(m, active & _pairs_within(m, z))
        if np.array_equal(new, z):
            return z
        z = new


def _prob1_min(m, target, active, prob0):
    """States where every policy reaches the target almost surely."""
    return ~_backward_reach(m, prob0, active, ~target)


def _prob1_max(m, target, active):
    """States where some policy reaches the target almost surely."""
    u = np.ones(m.n_states, dtype=bool)
    while True:
        r = _backward_reach(m, target, active & _pairs_within(m, u), u)
        if np.array_equal(r, u):
            return u
        u = r


# --------------------------------------------------------------------------
# reachability

def _optimize(m, q_pairs, active, mode):
    fill = -np.inf if mode == "max" else np.inf
    vals = np.where(active, q_pairs, fill)
    red = np.maximum if mode == "max" else np.minimum
    return red.reduceat(vals, m.state_ptr[:-1])


def _chain_matrix(m: Mdp, policy: Policy) -> sp.csr_matrix:
    policy.check(m)
    w = policy.probs[m.pair_state, m.pair_action]
    agg = sp.csr_matrix((w, (m.pair_state, np.arange(m.pair_state.size))),
                        shape=(m.n_states, m.pair_state.size))
    return (agg @ m.P).tocsr()


def _linear_solve(A, b):
    """Solve ``A x = b``: direct for small systems, BiCGSTAB with a residual
    check (falling back to the direct solver) for large ones."""
    if A.shape[0] > DIRECT_LIMIT:
        x, info = bicgstab(A.tocsr(), b, rtol=1e-13, atol=0.0, maxiter=20000)
        if info == 0 and np.all(np.isfinite(x)) and np.max(np.abs(A @ x - b), initial=0.0) <= 1e-11:
            return x
    return np.atleast_1d(spsolve(A.tocsc(), b))


def _solve_chain(C, target, prob0, prob1):
    x = np.where(prob1, 1.0, 0.0)
    rest = ~(prob0 | prob1)
    if rest.any():
        idx = np.flatnonzero(rest)
        A = sp.identity(idx.size, format="csc") - C[idx][:, idx].tocsc()
        b = np.asarray(C[idx][:, np.flatnonzero(prob1)].sum(axis=1)).ravel()
        x[idx] = _linear_solve(A, b)
    return np.clip(x, 0.0, 1.0)


def _chain_sets(C, target):
    reach = target.copy()
    while True:
        new = reach | ((C @ reach.astype(float)) > 0)
        if np.array_equal(new, reach):
            break
        reach = new
    prob0 = ~reach
    escape = prob0.copy()
    while True:
        new = escape | (~target & ((C @ escape.astype(float)) > 0))
        if np.array_equal(new, escape):
            break
        escape = new
    return prob0, ~escape


def _policy_reach(m, target, policy, horizon):
    C = _chain_matrix(m, policy)
    if horizon is not None:
        v = target.astype(float)
        for _ in range(horizon):
            v = np.where(target, 1.0, C @ v)
        return v
    prob0, prob1 = _chain_sets(C, target)
    return _solve_chain(C, target, prob0, prob1)


def _value_iteration(m, v, fixed, active, mode, tol):
    """Value iteration that periodically switches to policy iteration from
    the greedy policy of the current iterate (see :func:`_policy_iteration`)."""
    free = ~fixed
    for sweep in range(1, MAX_SWEEPS + 1):
        new = np.where(free, _optimize(m, m.P @ v, active, mode), v)
        if np.max(np.abs(new - v), initial=0.0) <= tol:
            exact = _policy_iteration(m, new, fixed, active, mode)
            return new if exact is None else exact
        v = new
        if sweep % POLISH_EVERY == 0:
            exact = _policy_iteration(m, v, fixed, active, mode)
            if exact is not None:
                return exact
    raise InvalidConfig("value iteration did not converge within the sweep limit")


def _reaches_fixed(C_free, out_mass):
    """True when every free state of the chain reaches a fixed state."""
    ok = out_mass > 0
    while True:
        new = ok | ((C_free @ ok.astype(float)) > 0)
        if new.all():
            return True
        if np.array_equal(new, ok):
            return False
        ok = new


def _greedy(m, key, current=None):
    """First pair of each state minimizing ``key``; ``current`` pairs are kept
    unless some pair is better by more than the improvement threshold."""
    low = np.minimum.reduceat(key, m.state_ptr[:-1])
    best = key == low[m.pair_state]
    pairs = np.flatnonzero(best)
    choice = pairs[np.unique(m.pair_state[pairs], return_index=True)[1]]
    if current is not None:
        keep = key[current] <= low + IMPROVE_TOL
        choice = np.where(keep, current, choice)
    return choice


def _policy_iteration(m, v, fixed, active, mode):
    """Exact values by policy iteration started from the greedy policy of ``v``.

    Returns None when the start policy does not leave the free states with
    probability one (its linear system would be singular).  Switching only on
    strict improvement keeps every later policy proper: in a closed set of
    free states the extreme-valued state cannot strictly improve.  The result
    is a policy value and a Bellman fixed point, hence optimal: for
    maximization it lies between the least fixed point and the optimum, for
    minimization the fixed point is unique once the probability-zero states
    are removed.
    """
    sign = -1.0 if mode == "max" else 1.0
    idx = np.flatnonzero(~fixed)
    fixed_idx = np.flatnonzero(fixed)
    choice = _greedy(m, np.where(active, sign * (m.P @ v), np.inf))
    cand = v.copy()
    for it in range(PI_MAX_ITER):
        C = m.P[choice[idx]]
        C_free = C[:, idx]
        if it == 0 and not _reaches_fixed(C_free, np.asarray(C[:, fixed_idx].sum(axis=1)).ravel()):
            return None
        A = sp.identity(idx.size, format="csc") - C_free.tocsc()
        b = C[:, fixed_idx] @ v[fixed]
        try:
            x = _linear_solve(A, b)
        except Exception:
            return None
        if not np.all(np.isfinite(x)):
            return None
        cand[idx] = np.clip(x, 0.0, 1.0)
        key = np.where(active, sign * (m.P @ cand), np.inf)
        new = _greedy(m, key, choice)
        if np.array_equal(new[idx], choice[idx]):
            resid = np.abs(_optimize(m, m.P @ cand, active, mode) - cand)[idx]
            return cand if np.max(resid, initial=0.0) <= 1e-9 else None
        choice = new
    return None


def reach_prob(m: Mdp, q: ReachQuery) -> np.ndarray:
    """Probability of reaching the target from every state."""
    target = state_mask(m, q.target)
    if q.mode == "policy":
        return _policy_reach(m, target, q.policy, q.horizon)
    active = _pair_mask(m, q.restriction)
    if q.horizon is not None:
        v = target.astype(float)
        for _ in range(q.horizon):
            v = np.where(target, 1.0, _optimize(m, m.P @ v, active, q.mode))
        return v
    if q.mode == "max":
        prob0 = _prob0_max(m, target, active)
        prob1 = _prob1_max(m, target, active)
    else:
        prob0 = _prob0_min(m, target, active)
        prob1 = _prob1_min(m, target, active, prob0)
    prob1 |= target
    v = np.where(prob1, 1.0, 0.0)
    fixed = prob0 | prob1
    if fixed.all():
        return v
    return _value_iteration(m, v, fixed, active, q.mode, q.tolerance)


def reach_prob_after_action(m: Mdp, s: int, a: int, q: ReachQuery) -> float:
    """Reach probability after taking ``a`` in ``s`` and continuing per the query."""
    succ = m.successors(s, a)
    inner = q if q.horizon is None else ReachQuery(q.target, max(q.horizon - 1, 0), q.mode,
                                                   q.policy, q.restriction, q.tolerance)
    target = state_mask(m, q.target)
    if target[s]:
        return 1.0
    if q.horizon == 0:
        return 0.0
    v = reach_prob(m, inner)
    return float(sum(p * v[t] for t, p in succ))


def avoid_prob(m: Mdp, q: ReachQuery) -> np.ndarray:
    """Probability of never visiting the target (within the horizon).

    Computed directly as a greatest fixed point on avoidance values, not by
    complementing :func:`reach_prob`; the two agree by the usual identities
    (maximal avoidance is one minus minimal reachability).
    """
    target = state_mask(m, q.target)
    safe = ~target
    if q.mode == "policy":
        C = _chain_matrix(m, q.policy)
        if q.horizon is not None:
            v = safe.astype(float)
            for _ in range(q.horizon):
                v = np.where(safe, C @ v, 0.0)
            return v
        # surely-avoiding states: closed under the chain inside the safe set
        z = safe.copy()
        while True:
            new = z & ((C @ (~z).astype(float)) == 0)
            if np.array_equal(new, z):
                break
            z = new
        # states that cannot reach the surely-avoiding set avoid with probability 0
        can = z.copy()
        while True:
            new = can | (safe & ((C @ can.astype(float)) > 0))
            if np.array_equal(new, can):
                break
            can = new
        return _solve_chain(C, z, ~can, z)
    active = _pair_mask(m, q.restriction)
    if q.horizon is not None:
        v = safe.astype(float)
        for _ in range(q.horizon):
            v = np.where(safe, _optimize(m, m.P @ v, active, q.mode), 0.0)
        return v
    # states that avoid surely (for some policy / for every policy)
    z = safe.copy()
    while True:
        inside = active & _pairs_within(m, z)
        ok = _any_per_state(m, inside) if q.mode == "max" else _all_per_state(m, inside, active)
        new = z & ok
        if np.array_equal(new, z):
            break
        z = new
    # states that avoid with probability zero
    if q.mode == "max":
        can = z.copy()
        while True:
            new = can | (safe & _any_per_state(m, active & _pairs_touch(m, can)))
            if np.array_equal(new, can):
                break
            can = new
        zero = ~can
    else:
        # some policy forces the target almost surely: nested fixed point
        u = np.ones(m.n_states, dtype=bool)
        while True:
            r = target.copy()
            while True:
                ok = active & _pairs_within(m, u) & _pairs_touch(m, r)
                new = r | (u & _any_per_state(m, ok))
                if np.array_equal(new, r):
                    break
                r = new
            if np.array_equal(r, u):
                break
            u = r
        zero = u
    fixed = z | zero
    v = np.where(z, 1.0, 0.0)
    if fixed.all():
        return v
    v = np.where(fixed, v, 1.0)
    return _value_iteration(m, v, fixed, active, q.mode, q.tolerance)


# --------------------------------------------------------------------------
# products

def product(m1: Mdp, m2: Mdp) -> Mdp:
    """Synchronous product; state ``(s1, s2)`` has id ``s1 * m2.n_states + s2``.

    When ``m2`` has a single action (a Markov chain) the product keeps the
    actions of ``m1``; otherwise joint action ``(a1, a2)`` has id
    ``a1 * m2.n_actions + a2``.
    """
    n2 = m2.n_states
    chain = m2.n_actions == 1
    P1, P2 = m1.P, m2.P
    rows_state, rows_action, blocks = [], [], []
    for s1 in range(m1.n_states):
        for i in range(m1.state_ptr[s1], m1.state_ptr[s1 + 1]):
            a1 = m1.pair_action[i]
            for s2 in range(n2):
                for j in range(m2.state_ptr[s2], m2.state_ptr[s2 + 1]):
                    a2 = m2.pair_action[j]
                    rows_state.append(s1 * n2 + s2)
                    rows_action.append(a1 if chain else a1 * m2.n_actions + a2)
                    blocks.append((i, j))
    order = np.lexsort((rows_action, rows_state))
    pi = np.array([blocks[k][0] for k in order])
    pj = np.array([blocks[k][1] for k in order])
    P = sp.csr_matrix(sp.kron(P1, P2, format="csr")[pi * P2.shape[0] + pj])
    labels = {}
    for name, states in m1.labels.items():
        labels[name] = [s1 * n2 + s2 for s1 in states for s2 in range(n2)]
    for name, states in m2.labels.items():
        labels.setdefault(name, [])
        labels[name] = sorted(set(labels[name]) | {s1 * n2 + s2 for s1 in range(m1.n_states)
                                                   for s2 in states})
    n_actions = m1.n_actions if chain else m1.n_actions * m2.n_actions
    return Mdp.from_arrays(m1.n_states * n2, n_actions, np.array(rows_state)[order],
                           np.array(rows_action)[order], P, labels)


def markov_chain(n_states: int, transitions) -> Mdp:
    """A Markov chain as a one-action MDP (``transitions[s] = [(t, p), ...]``)."""
    return Mdp.from_transitions(n_states, 1, {(s, 0): succ for s, succ in enumerate(transitions)})


# --------------------------------------------------------------------------
# probabilistic shields

@dataclass(frozen=True, eq=False)
class ProbShieldTable:
    """Allowed actions of a probabilistic shield plus its fallback policy."""

    allowed: np.ndarray
    fallback: np.ndarray
    threshold: float
    mode: str
    horizon: int | None
    action_values: np.ndarray
    state_values: np.ndarray

    def is_allowed(self, s: int, a: int) -> bool:
        return bool(self.allowed[s, a])

    def correct(self, s: int, a: int) -> int:
        return int(a) if self.allowed[s, a] else int(self.fallback[s])


def _max_avoid_action_values(m: Mdp, unsafe, horizon):
    """Max avoidance after each pair with an optimal continuation."""
    cont = None if horizon is None else max(horizon - 1, 0)
    v = avoid_prob(m, ReachQuery(unsafe, cont, "max"))
    q = m.P @ v
    unsafe_mask = state_mask(m, unsafe)
    q[unsafe_mask[m.pair_state]] = 0.0
    if horizon == 0:
        q = np.where(unsafe_mask[m.pair_state], 0.0, 1.0)
    return q


def synth_prob_shield(m: Mdp, unsafe, threshold: float, horizon: int | None = None,
                      mode: str = "relative", fallback: Sequence[int] | None = None,
                      tie_tolerance: float = 1e-9) -> ProbShieldTable:
    """Allow ``a`` at ``s`` iff its optimal avoidance clears the threshold.

    Relative mode compares against ``threshold`` times the state's optimal
    avoidance, absolute mode against ``threshold`` itself.  Comparisons are
    non-strict up to ``tie_tolerance`` so exact ties count as allowed.
    """
    if not 0 <= threshold <= 1:
        raise InvalidConfig("threshold must lie in [0, 1]")
    if mode not in ("relative", "absolute"):
        raise InvalidConfig(f"unknown shield mode {mode!r}")
    q = _max_avoid_action_values(m, unsafe, horizon)
    best = np.maximum.reduceat(q, m.state_ptr[:-1])
    bound = threshold * best[m.pair_state] if mode == "relative" else np.full(q.shape, threshold)
    ok = q >= bound - tie_tolerance
    allowed = np.zeros((m.n_states, m.n_actions), dtype=bool)
    allowed[m.pair_state, m.pair_action] = ok
    values = np.full((m.n_states, m.n_actions), np.nan)
    values[m.pair_state, m.pair_action] = q
    if fallback is None:
        # lexicographically first maximizer of avoidance
        fb = np.empty(m.n_states, dtype=np.int64)
        for s in range(m.n_states):
            lo, hi = m.state_ptr[s], m.state_ptr[s + 1]
            seg = q[lo:hi]
            fb[s] = m.pair_action[lo + int(np.flatnonzero(seg >= seg.max() - tie_tolerance)[0])]
    else:
        fb = np.asarray(fallback, dtype=np.int64)
        if (fb.shape != (m.n_states,) or np.any((fb < 0) | (fb >= m.n_actions))
                or not np.all(m.enabled[np.arange(m.n_states), fb])):
            raise InvalidPolicy("fallback must pick an enabled action in every state")
    return ProbShieldTable(_readonly(allowed), _readonly(fb), float(threshold), mode, horizon,
                           _readonly(values), _readonly(best))


def write_prob_shield_csv(table: ProbShieldTable, m: Mdp, path) -> None:
    rows = ["state,action,allowed,fallback"]
    for i in range(m.pair_state.size):
        s, a = int(m.pair_state[i]), int(m.pair_action[i])
        rows.append(f"{s},{a},{int(table.allowed[s, a])},{int(table.fallback[s])}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def read_prob_shield_csv(path) -> dict[tuple[int, int], tuple[bool, int]]:
    out = {}
    with open(path) as fh:
        if fh.readline().strip() != "state,action,allowed,fallback":
            raise InvalidConfig(f"{path}: unexpected header")
        for line in fh:
            s, a, ok, fb = (int(x) for x in line.strip().split(","))
            out[(s, a)] = (bool(ok), fb)
    return out


# --------------------------------------------------------------------------
# MDP file format

def write_mdp(m: Mdp, path) -> None:
    """Line format: ``mdp n_states n_actions``, optional ``actions``/``states``
    name lines, ``label name ids...`` and one ``s a s' p`` line per transition."""
    lines = [f"mdp {m.n_states} {m.n_actions}"]
    if m.action_names:
        lines.append("actions " + " ".join(m.action_names))
    if m.state_names:
        lines.append("states " + " ".join(m.state_names))
    for name in sorted(m.labels):
        lines.append(f"label {name} " + " ".join(map(str, sorted(m.labels[name]))))
    for i in range(m.pair_state.size):
        lo, hi = m.P.indptr[i], m.P.indptr[i + 1]
        for t, p in zip(m.P.indices[lo:hi], m.P.data[lo:hi]):
            lines.append(f"{m.pair_state[i]} {m.pair_action[i]} {t} {float(p)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _id_or_name(tok: str, names) -> int:
    """Integer tokens are ids; any other token is looked up among ``names``."""
    if tok.lstrip("-").isdigit():
        return int(tok)
    if names and tok in names:
        return list(names).index(tok)
    raise ValueError(f"unknown name {tok!r}")


def read_mdp(path) -> Mdp:
    """Read the line format of :func:`write_mdp`.  Integer tokens are ids;
    state and action names may be used instead when declared."""
    header = None
    actions = states = None
    labels, rows = {}, []

    def sid(tok):
        return _id_or_name(tok, states)

    def aid(tok):
        return _id_or_name(tok, actions)

    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "mdp":
                    header = (int(parts[1]), int(parts[2]))
                elif parts[0] == "actions":
                    actions = parts[1:]
                elif parts[0] == "states":
                    states = parts[1:]
                elif parts[0] == "label":
                    labels[parts[1]] = [sid(t) for t in parts[2:]]
                elif len(parts) == 4:
                    rows.append((sid(parts[0]), aid(parts[1]), sid(parts[2]), float(parts[3])))
                else:
                    raise ValueError(line)
            except (ValueError, IndexError) as exc:
                raise InvalidConfig(f"{path}:{lineno}: cannot parse {line!r}") from exc
    if header is None:
        raise InvalidConfig(f"{path}: missing 'mdp' header")
    return Mdp.from_transitions(header[0], header[1], rows, labels, states, actions)


def write_policy_csv(policy: Policy, path) -> None:
    """CSV ``state,action,probability`` with one row per positive entry."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "action", "probability"])
        for s, a in zip(*np.nonzero(policy.probs)):
            w.writerow([int(s), int(a), repr(float(policy.probs[s, a]))])


def read_policy_csv(path, m: Mdp) -> Policy:
    """Read a policy CSV; actions may be ids or action names of ``m``."""
    probs = np.zeros((m.n_states, m.n_actions))
    names = list(m.action_names or ())
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["state", "action", "probability"]:
            raise InvalidConfig(f"{path}: expected header state,action,probability")
        for row in reader:
            try:
                s = int(row["state"])
                a = _id_or_name(row["action"], names)
                probs[s, a] += float(row["probability"])
            except (ValueError, IndexError) as exc:
                raise InvalidConfig(f"{path}: bad row {row}") from exc
    pol = Policy(probs)
    pol.check(m)
    return pol


def resolve_states(m: Mdp, spec: str) -> list[int]:
    """Parse a comma separated list of state ids, state names or label names."""
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok in m.labels:
            out.extend(sorted(m.labels[tok]))
            continue
        try:
            out.append(_id_or_name(tok, m.state_names))
        except ValueError:
            raise InvalidConfig(f"unknown state or label {tok!r}") from None
    return out


# --------------------------------------------------------------------------
# transition fitting

def round_half_up(x):
    """Round to the nearest integer, exact halves upward."""
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)


def _range_index(value: float, refs: np.ndarray) -> int:
    """Index of the reference whose midpoint range contains ``value``."""
    mids = (refs[:-1] + refs[1:]) / 2
    return int(np.searchsorted(mids, value, side="right"))


@dataclass(frozen=True, eq=False)
class FittedCarDynamics:
    """Car dynamics fitted per (reference action, reference velocity) cell.

    ``gamma[i, j]`` is the least-squares ratio of position increase to
    initial speed; ``dv_dist[i][j]`` maps discretized speed increases to
    relative frequencies.
    """

    actions: np.ndarray
    velocities: np.ndarray
    gamma: np.ndarray
    dv_dist: tuple
    mu_pos: float
    mu_vel: float

    def cell(self, V: int, action_index: int) -> tuple[int, int]:
        return action_index, _range_index(V / self.mu_vel, self.velocities)

    def transitions(self, X: int, V: int, action_index: int, x_max: int, v_max: int):
        """Successor ``(X', V', p)`` triples in local-discrete units, clamped to the grid."""
        i, j = self.cell(V, action_index)
        dX = int(round_half_up(self.gamma[i, j] * V * self.mu_pos / self.mu_vel))
        out = defaultdict(float)
        for dV, p in self.dv_dist[i][j].items():
            x2 = min(max(X + dX, 0), x_max)
            v2 = min(max(V + dV, 0), v_max)
            out[(x2, v2)] += p
        return sorted((x, v, p) for (x, v), p in out.items())

    def to_mdp(self, x_max: int, v_max: int) -> Mdp:
        """Car MDP over positions ``0..x_max`` and speeds ``0..v_max`` (state ``X*(v_max+1)+V``)."""
        nv = v_max + 1
        rows = []
        for X in range(x_max + 1):
            for V in range(nv):
                for a in range(self.actions.size):
                    for x2, v2, p in self.transitions(X, V, a, x_max, v_max):
                        rows.append((X * nv + V, a, x2 * nv + v2, p))
        return Mdp.from_transitions((x_max + 1) * nv, int(self.actions.size), rows,
                                    action_names=[f"{a:g}" for a in self.actions])


def fit_transitions(samples: Iterable[tuple[float, float, float, float]],
                    actions: Sequence[float], velocities: Sequence[float],
                    mu_pos: float = 0.5, mu_vel: float = 0.5,
                    require_all_cells: bool = True) -> FittedCarDynamics:
    """Fit car dynamics from samples ``(initial_speed, command, dx, dv)``.

    Each sample falls in the cell of its nearest reference action and
    reference velocity (midpoint ranges).  Per cell the position factor is
    the closed-form least-squares slope through the origin and the speed
    increase distribution is the relative frequency of ``round(dv*mu_vel)``.
    """
    if mu_pos <= 0 or mu_vel <= 0:
        raise InvalidConfig("multipliers must be positive")
    acts = np.asarray(sorted(actions), dtype=float)
    vels = np.asarray(sorted(velocities), dtype=float)
    if acts.size == 0 or vels.size == 0:
        raise InvalidConfig("action and velocity grids must be nonempty")
    num = np.zeros((acts.size, vels.size))
    den = np.zeros((acts.size, vels.size))
    counts = [[defaultdict(int) for _ in vels] for _ in acts]
    n = np.zeros((acts.size, vels.size), dtype=np.int64)
    for u, cmd, dx, dv in samples:
        i = _range_index(cmd, acts)
        j = _range_index(u, vels)
        num[i, j] += dx * u
        den[i, j] += u * u
        counts[i][j][int(round_half_up(dv * mu_vel))] += 1
        n[i, j] += 1
    gamma = np.zeros_like(num)
    for i in range(acts.size):
        for j in range(vels.size):
            if n[i, j] == 0:
                if require_all_cells:
                    raise MissingData(
                        f"no samples for action {acts[i]:g} at reference speed {vels[j]:g}")
                continue
            gamma[i, j] = num[i, j] / den[i, j] if den[i, j] > 0 else 0.0
    dist = tuple(tuple({dV: c / n[i, j] for dV, c in sorted(counts[i][j].items())}
                       for j in range(vels.size)) for i in range(acts.size))
    return FittedCarDynamics(_readonly(acts), _readonly(vels), _readonly(gamma), dist,
                             float(mu_pos), float(mu_vel))


def pedestrian_chain(x_max: int, y_max: int, sigma: float, dt: float = 1.0,
                     mu_pos: float = 0.5, support: int | None = None) -> Mdp:
    """Pedestrian random walk on ``0..x_max`` times ``0..y_max``.

    Each axis moves by an independent Gaussian displacement with standard
    deviation ``sigma * dt`` metres, discretized to the grid, truncated at
    the border and renormalized.  State id is ``x * (y_max + 1) + y``.
    """
    if sigma <= 0:
        raise InvalidConfig("sigma must be positive")
    sd = sigma * dt * mu_pos
    k = support if support is not None else int(math.ceil(4 * sd))
    steps = np.arange(-k, k + 1)
    # probability mass of each integer displacement (bins of width one)
    w = norm.cdf((steps + 0.5) / sd) - norm.cdf((steps - 0.5) / sd)
    ny = y_max + 1
    rows = []
    for x in range(x_max + 1):
        xs = x + steps
        okx = (xs >= 0) & (xs <= x_max)
        wx = w[okx] / w[okx].sum()
        for y in range(ny):
            ys = y + steps
            oky = (ys >= 0) & (ys <= y_max)
            wy = w[oky] / w[oky].sum()
            for x2, px in zip(xs[okx], wx):
                for y2, py in zip(ys[oky], wy):
                    rows.append((x * ny + y, 0, int(x2) * ny + int(y2), px * py))
    return Mdp.from_transitions((x_max + 1) * ny, 1, rows)
