"""Two-player safety games with delayed observations.

Game graphs are bipartite: environment states move to agent states, agent
states move to environment states through actions.  Environment and agent
states live in separate dense id ranges.

Allowed-action sets are stored as ``uint64`` bitmasks, so the agent alphabet
is limited to 64 actions.  A strategy table under memory ``m`` has shape
``(n_agent_states, A**m)``; registers are written oldest action first and
encoded row-major, so ``register[0]`` is the pending action that was applied
at the observed state.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InfeasibleState, InvalidConfig, InvalidInput
from .rdm_core import PostShield, PreShield

MAX_ACTIONS = 64


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _bits(n: int) -> np.ndarray:
    return np.left_shift(np.uint64(1), np.arange(n, dtype=np.uint64))


def _pack(flags: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 masks."""
    n = flags.shape[-1]
    return np.bitwise_or.reduce(np.where(flags, _bits(n), np.uint64(0)), axis=-1)


def _mask_to_set(mask) -> frozenset[int]:
    mask = int(mask)
    return frozenset(i for i in range(mask.bit_length()) if mask >> i & 1)


@dataclass(frozen=True, eq=False)
class GameGraph:
    """Bipartite safety game.

    ``env_ptr``/``env_dst`` hold environment successors in CSR form (agent
    state ids), ``agent_next[s, a]`` is the environment state reached by
    action ``a`` or ``-1`` when the action is not enabled.
    """

    n_env: int
    n_ag: int
    n_actions: int
    env_ptr: np.ndarray
    env_dst: np.ndarray
    agent_next: np.ndarray
    safe_env: np.ndarray
    safe_ag: np.ndarray
    initial: int = 0
    env_labels: np.ndarray | None = None
    action_names: tuple[str, ...] | None = None

    def __post_init__(self):
        ptr = np.asarray(self.env_ptr, dtype=np.int64)
        dst = np.asarray(self.env_dst, dtype=np.int64)
        nxt = np.asarray(self.agent_next, dtype=np.int64)
        if ptr.shape != (self.n_env + 1,) or ptr[0] != 0 or ptr[-1] != dst.size:
            raise InvalidConfig("malformed environment successor pointers")
        if np.any(np.diff(ptr) < 1):
            raise InvalidConfig("every environment state needs a successor")
        if dst.size and (dst.min() < 0 or dst.max() >= self.n_ag):
            raise InvalidConfig("environment successor outside agent states")
        if nxt.shape != (self.n_ag, self.n_actions):
            raise InvalidConfig("agent transition table has the wrong shape")
        if nxt.size and (nxt.min() < -1 or nxt.max() >= self.n_env):
            raise InvalidConfig("agent transition outside environment states")
        if self.n_ag and np.any((nxt >= 0).sum(axis=1) == 0):
            raise InvalidConfig("every agent state needs an enabled action")
        if not 0 <= self.initial < self.n_env:
            raise InvalidConfig("initial state must be an environment state")
        labels = self.env_labels
        if labels is None:
            labels = np.arange(dst.size) - np.repeat(ptr[:-1], np.diff(ptr))
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != dst.shape:
            raise InvalidConfig("one label per environment edge required")
        if labels.size:
            src = np.repeat(np.arange(self.n_env, dtype=np.int64), np.diff(ptr))
            span = int(labels.max() - labels.min()) + 1
            if np.unique(src * span + (labels - labels.min())).size != labels.size:
                raise InvalidConfig("duplicate environment label at some state")
        object.__setattr__(self, "env_ptr", _readonly(ptr))
        object.__setattr__(self, "env_dst", _readonly(dst))
        object.__setattr__(self, "agent_next", _readonly(nxt))
        object.__setattr__(self, "env_labels", _readonly(labels))
        object.__setattr__(self, "safe_env", _readonly(np.asarray(self.safe_env, dtype=bool)))
        object.__setattr__(self, "safe_ag", _readonly(np.asarray(self.safe_ag, dtype=bool)))

    @classmethod
    def from_edges(cls, n_env: int, n_ag: int, n_actions: int,
                   env_edges: Iterable[tuple[int, int]],
                   agent_edges: Iterable[tuple[int, int, int]],
                   unsafe_env: Iterable[int] = (), unsafe_ag: Iterable[int] = (),
                   initial: int = 0, env_labels: dict[tuple[int, int], int] | None = None,
                   action_names: Sequence[str] | None = None) -> "GameGraph":
        """Build a game from edge lists; duplicate environment edges collapse."""
        edges = np.array(sorted(set((int(e), int(s)) for e, s in env_edges)), dtype=np.int64)
        edges = edges.reshape(-1, 2)
        counts = np.bincount(edges[:, 0], minlength=n_env) if edges.size else np.zeros(n_env, int)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        labels = None
        if env_labels is not None:
            labels = np.array([env_labels[(int(e), int(s))] for e, s in edges], dtype=np.int64)
        nxt = np.full((n_ag, n_actions), -1, dtype=np.int64)
        for s, a, e in agent_edges:
            if nxt[s, a] not in (-1, e):
                raise InvalidConfig(f"agent state {s} action {a} has two successors")
            nxt[s, a] = e
        safe_env = np.ones(n_env, dtype=bool)
        safe_env[list(unsafe_env)] = False
        safe_ag = np.ones(n_ag, dtype=bool)
        safe_ag[list(unsafe_ag)] = False
        return cls(n_env, n_ag, n_actions, ptr, edges[:, 1], nxt, safe_env, safe_ag,
                   initial, labels, tuple(action_names) if action_names else None)

    @classmethod
    def from_arrays(cls, n_env: int, n_ag: int, n_actions: int, env_src, env_dst,
                    agent_next, safe_env, safe_ag, initial: int = 0,
                    action_names: Sequence[str] | None = None) -> "GameGraph":
        """Build a game from parallel environment edge arrays; duplicates collapse."""
        key = np.unique(np.asarray(env_src, dtype=np.int64) * n_ag
                        + np.asarray(env_dst, dtype=np.int64))
        counts = np.bincount(key // n_ag, minlength=n_env)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(n_env, n_ag, n_actions, ptr, key % n_ag, agent_next, safe_env, safe_ag,
                   initial, None, tuple(action_names) if action_names else None)

    def env_successors(self, e: int) -> np.ndarray:
        return self.env_dst[self.env_ptr[e]:self.env_ptr[e + 1]]

    def enabled(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.agent_next[s] >= 0)

    def initial_agent_states(self) -> np.ndarray:
        return self.env_successors(self.initial)

    def env_and(self, rows: np.ndarray) -> np.ndarray:
        """Bitwise AND of agent-state rows over each environment state's successors."""
        return np.bitwise_and.reduceat(rows[self.env_dst], self.env_ptr[:-1], axis=0)

    def env_all(self, flags: np.ndarray) -> np.ndarray:
        return np.logical_and.reduceat(flags[self.env_dst], self.env_ptr[:-1], axis=0)

    def env_any(self, flags: np.ndarray) -> np.ndarray:
        return np.logical_or.reduceat(flags[self.env_dst], self.env_ptr[:-1], axis=0)


# --------------------------------------------------------------------------
# game file format

def write_game(game: GameGraph, path) -> None:
    """Write the line-oriented game format documented in the README."""
    lines = [f"game {game.n_env} {game.n_ag} {game.n_actions}", f"initial {game.initial}"]
    if game.action_names:
        lines.append("actions " + " ".join(game.action_names))
    for e in range(game.n_env):
        lo, hi = game.env_ptr[e], game.env_ptr[e + 1]
        for s, lab in zip(game.env_dst[lo:hi], game.env_labels[lo:hi]):
            lines.append(f"E {e} -> {s} @{lab}")
    for s, a in zip(*np.nonzero(game.agent_next >= 0)):
        lines.append(f"A {s} {a} -> {game.agent_next[s, a]}")
    bad_env = np.flatnonzero(~game.safe_env)
    bad_ag = np.flatnonzero(~game.safe_ag)
    if bad_env.size:
        lines.append("unsafe env " + " ".join(map(str, bad_env)))
    if bad_ag.size:
        lines.append("unsafe ag " + " ".join(map(str, bad_ag)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


_E_LINE = re.compile(r"^E\s+(\d+)\s*->\s*(\d+)(?:\s+@(\d+))?$")
_A_LINE = re.compile(r"^A\s+(\d+)\s+(\S+)\s*->\s*(\d+)$")


def read_game(path) -> GameGraph:
    header = None
    initial = 0
    names = None
    env_edges, labels, agent_edges = [], {}, []
    unsafe_env, unsafe_ag = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head = line.split()[0]
            try:
                if head == "game":
                    header = tuple(int(x) for x in line.split()[1:4])
                elif head == "initial":
                    initial = int(line.split()[1])
                elif head == "actions":
                    names = line.split()[1:]
                elif head == "E":
                    m = _E_LINE.match(line)
                    if not m:
                        raise ValueError(line)
                    e, s = int(m[1]), int(m[2])
                    env_edges.append((e, s))
                    if m[3] is not None:
                        labels[(e, s)] = int(m[3])
                elif head == "A":
                    m = _A_LINE.match(line)
                    if not m:
                        raise ValueError(line)
                    act = m[2]
                    a = names.index(act) if names and act in names else int(act)
                    agent_edges.append((int(m[1]), a, int(m[3])))
                elif head == "unsafe":
                    kind, *ids = line.split()[1:]
                    target = {"env": unsafe_env, "ag": unsafe_ag}[kind]
                    target.extend(int(x) for x in ids)
                else:
                    raise ValueError(line)
            except (ValueError, KeyError, IndexError) as exc:
                raise InvalidConfig(f"{path}:{lineno}: cannot parse {line!r}") from exc
    if header is None:
        raise InvalidConfig(f"{path}: missing 'game' header")
    if labels and len(labels) != len(set(env_edges)):
        raise InvalidConfig(f"{path}: environment labels must be given for all edges or none")
    return GameGraph.from_edges(*header, env_edges, agent_edges, unsafe_env, unsafe_ag,
                                initial, labels or None, names)


# --------------------------------------------------------------------------
# perfect information

def winning_region(game: GameGraph) -> tuple[np.ndarray, np.ndarray]:
    """Greatest fixed point of states from which the agent stays safe forever.

    Returns boolean masks over environment and agent states.
    """
    bad_ag = ~game.safe_ag
    bad_env = ~game.safe_env
    nxt = game.agent_next
    defined = nxt >= 0
    safe_idx = np.where(defined, nxt, 0)
    while True:
        new_env = bad_env | game.env_any(bad_ag)
        good_action = defined & ~new_env[safe_idx]
        new_ag = bad_ag | ~good_action.any(axis=1)
        if np.array_equal(new_env, bad_env) and np.array_equal(new_ag, bad_ag):
            break
        bad_env, bad_ag = new_env, new_ag
    return ~bad_env, ~bad_ag


def _perfect_info_masks(game, win_env, win_ag) -> np.ndarray:
    nxt = game.agent_next
    good = (nxt >= 0) & win_env[np.where(nxt >= 0, nxt, 0)] & win_ag[:, None]
    return _pack(good)


@dataclass(frozen=True, eq=False)
class MaxPermStrategy:
    """Maximally permissive strategy under delay ``delay`` and memory ``memory``.

    ``table[s, idx]`` is the allowed-action mask at observed agent state ``s``
    with register index ``idx``.  ``transient[k]`` holds the masks used before
    the first observation arrives, for registers of length ``k``.  When
    ``memory < delay`` the last entry of ``transient`` has full register
    length and serves every blind step after the register fills up.
    """

    delay: int
    memory: int
    n_actions: int
    table: np.ndarray
    transient: tuple[np.ndarray, ...]
    win_env: np.ndarray
    win_ag: np.ndarray

    def register_index(self, register: Sequence[int]) -> int:
        idx = 0
        for a in register:
            if not 0 <= int(a) < self.n_actions:
                raise InvalidInput(f"action {a} outside alphabet")
            idx = idx * self.n_actions + int(a)
        return idx

    def allowed_mask(self, state: int | None, register: Sequence[int] = ()) -> int:
        register = tuple(register)
        if state is None:
            k = len(register)
            if k >= len(self.transient):
                raise InvalidInput(f"no transient entry with register length {k}")
            return int(self.transient[k][self.register_index(register)])
        if len(register) != self.memory:
            raise InvalidInput(
                f"steady-state register must have length {self.memory}, got {len(register)}")
        return int(self.table[state, self.register_index(register)])

    def allowed(self, state: int | None, register: Sequence[int] = ()) -> frozenset[int]:
        """Allowed actions; ``state=None`` queries the transient (no observation yet)."""
        return _mask_to_set(self.allowed_mask(state, register))

    def registers(self) -> Iterator[tuple[int, ...]]:
        return _registers(self.n_actions, self.memory)

    def controllable(self) -> np.ndarray:
        return np.any(self.table != 0, axis=1)


def _registers(n_actions: int, length: int) -> Iterator[tuple[int, ...]]:
    if length == 0:
        yield ()
        return
    for head in range(n_actions):
        for rest in _registers(n_actions, length - 1):
            yield (head,) + rest


def solve_perfect_info(game: GameGraph) -> MaxPermStrategy:
    win_env, win_ag = winning_region(game)
    table = _perfect_info_masks(game, win_env, win_ag)[:, None]
    return MaxPermStrategy(0, 0, game.n_actions, _readonly(table), (),
                           _readonly(win_env), _readonly(win_ag))


# --------------------------------------------------------------------------
# delayed observation

def _check_actions(game):
    if game.n_actions > MAX_ACTIONS:
        raise InvalidConfig(f"at most {MAX_ACTIONS} agent actions are supported")


def _full_memory_layer(game, prev, A, m, win_env, win_ag):
    """Layer with register length m equal to the delay: the action applied at
    the observed state is the oldest register entry."""
    n = game.n_ag
    env_rows = game.env_and(prev)
    out = np.zeros((n, A, A ** (m - 1)), dtype=np.uint64)
    for r0 in range(A):
        e = game.agent_next[:, r0]
        ok = (e >= 0) & win_ag
        ok[ok] = win_env[e[ok]]
        out[ok, r0] = env_rows[e[ok]]
    return out.reshape(n, A ** m)


def _restricted_layer(game, prev, A, m, win_ag):
    """Layer where the action applied at the observed state is forgotten."""
    env_rows = game.env_and(prev)
    out = np.full(prev.shape, np.uint64((1 << A) - 1), dtype=np.uint64)
    for y in range(A):
        e = game.agent_next[:, y]
        ok = e >= 0
        out[ok] &= env_rows[e[ok]]
    out[~win_ag] = 0
    return out


def _shrink(game, table, A, m, full):
    """Drop actions that can lead to an empty entry at the next observation."""
    n = game.n_ag
    nxt = game.agent_next
    while True:
        nonempty = table != 0
        if m == 0:
            env_ok = game.env_all(nonempty[:, 0])
            ok = np.ones(n, dtype=bool)
            for y in range(A):
                e = nxt[:, y]
                d = e >= 0
                ok[d] &= env_ok[e[d]]
            new = np.where(ok[:, None], table, np.uint64(0))
        else:
            env_ok = game.env_all(nonempty)
            env_mask = _pack(env_ok.reshape(game.n_env, A ** (m - 1), A))
            if full:
                mask = np.zeros((n, A, A ** (m - 1)), dtype=np.uint64)
                for r0 in range(A):
                    e = nxt[:, r0]
                    d = e >= 0
                    mask[d, r0] = env_mask[e[d]]
            else:
                common = np.full((n, A ** (m - 1)), np.uint64((1 << A) - 1), dtype=np.uint64)
                for y in range(A):
                    e = nxt[:, y]
                    d = e >= 0
                    common[d] &= env_mask[e[d]]
                mask = np.broadcast_to(common[:, None, :], (n, A, A ** (m - 1)))
            new = table & mask.reshape(n, A ** m)
        if np.array_equal(new, table):
            return table
        table = new


def delayed_layers(game: GameGraph, delay: int, memory: int
                   ) -> Iterator[tuple[int, int, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(d, m, table, win_env, win_ag)`` for d = 0..delay with m = min(d, memory)."""
    if not 0 <= memory <= delay:
        raise InvalidConfig(f"need 0 <= memory <= delay, got memory={memory}, delay={delay}")
    _check_actions(game)
    A = game.n_actions
    win_env, win_ag = winning_region(game)
    table = _perfect_info_masks(game, win_env, win_ag)[:, None]
    yield 0, 0, table, win_env, win_ag
    for d in range(1, delay + 1):
        m = min(d, memory)
        full = m == d
        if full:
            table = _full_memory_layer(game, table, A, m, win_env, win_ag)
        else:
            table = _restricted_layer(game, table, A, m, win_ag)
        table = _shrink(game, table, A, m, full)
        yield d, m, table, win_env, win_ag


def _transient(game, table, A, delay, m, win_ag, xi0):
    """Allowed sets for the choices made before the first observation.

    The agent starts blind: its first observation (of an initial agent state)
    arrives at choice ``delay + 1``.  Every initial agent state must then map
    to a nonempty entry.  Blind actions that drop out of memory before that
    observation are never checked by the table, so they are restricted to
    actions winning at every agent state the play can be in at that time.
    """
    if delay == 0:
        return ()
    J = game.initial_agent_states()
    all_bits = np.uint64((1 << A) - 1)
    nonempty_all_j = np.all(table[J] != 0, axis=0) & bool(np.all(win_ag[J]))

    if m == delay:
        levels = [None] * m
        levels[m - 1] = _pack(nonempty_all_j.reshape(A ** (m - 1), A))
        for k in range(m - 2, -1, -1):
            levels[k] = _pack((levels[k + 1] != 0).reshape(A ** k, A))
        return tuple(levels)

    # blind actions chosen at steps 1..delay-m are forgotten at observation time
    forgotten = delay - m
    constraint = []
    reach = np.zeros(game.n_ag, dtype=bool)
    reach[J] = True
    for _ in range(forgotten):
        mask = np.bitwise_and.reduce(xi0[reach]) if reach.any() else all_bits
        constraint.append(np.uint64(mask))
        nxt_reach = np.zeros(game.n_ag, dtype=bool)
        for y in _mask_to_set(mask):
            e = game.agent_next[reach, y]
            for env in np.unique(e[e >= 0]):
                nxt_reach[game.env_successors(env)] = True
        reach = nxt_reach
    # steps m+1..delay share the full-length blind key
    full_constraint = all_bits
    for i in range(m + 1, forgotten + 1):
        full_constraint &= constraint[i - 1]
    size = A ** m
    if m == 0:
        blind = np.array([full_constraint if nonempty_all_j[0] else 0], dtype=np.uint64)
    else:
        base = _pack(nonempty_all_j.reshape(A ** (m - 1), A))
        tail = np.arange(size) % (A ** (m - 1))
        blind = base[tail] & full_constraint
        while True:
            ne = (blind != 0).reshape(A ** (m - 1), A)
            new = blind & _pack(ne)[tail]
            if np.array_equal(new, blind):
                break
            blind = new
    levels = [None] * m + [blind.astype(np.uint64)]
    for k in range(m - 1, -1, -1):
        mask = _pack((levels[k + 1] != 0).reshape(A ** k, A))
        if k + 1 <= forgotten:
            mask = mask & constraint[k]
        levels[k] = mask
    return tuple(levels)


def solve_delayed(game: GameGraph, delay: int, memory: int) -> MaxPermStrategy:
    """Maximally permissive strategy when observations arrive ``delay`` steps late
    and the agent remembers its last ``memory`` actions."""
    if delay == 0:
        if memory != 0:
            raise InvalidConfig("memory cannot exceed the delay")
        return solve_perfect_info(game)
    layers = list(delayed_layers(game, delay, memory))
    _, m, table, win_env, win_ag = layers[-1]
    xi0 = layers[0][2][:, 0]
    transient = _transient(game, table, game.n_actions, delay, m, win_ag, xi0)
    return MaxPermStrategy(delay, memory, game.n_actions, _readonly(table),
                           tuple(_readonly(t) for t in transient),
                           _readonly(win_env), _readonly(win_ag))


# --------------------------------------------------------------------------
# fitness

@dataclass(frozen=True, eq=False)
class FitnessTable:
    """Integer fitness per agent state (``kind`` is robustness or controllability).

    ``unbounded`` is the value standing for an infinite fitness, if any.
    """

    kind: str
    values: np.ndarray
    unbounded: int | None = None

    def is_unbounded(self, s) -> bool:
        return self.unbounded is not None and int(self.values[s]) == self.unbounded

    def __getitem__(self, s):
        return self.values[s]


def robustness_values(game: GameGraph) -> FitnessTable:
    """Least number of agent steps after which some path ends in an agent
    state outside the winning region; 0 outside it.  Only agent states are
    inspected, as in the forward multisets.  States from which no path ever leaves get
    ``n_ag + 1``, a bound larger than any finite value."""
    _, win_ag = winning_region(game)
    cap = game.n_ag + 1
    dist = np.where(win_ag, cap, 0).astype(np.int64)
    nxt = game.agent_next
    while True:
        env_min = np.minimum.reduceat(dist[game.env_dst], game.env_ptr[:-1])
        best = np.full(game.n_ag, cap, dtype=np.int64)
        for y in range(game.n_actions):
            e = nxt[:, y]
            d = e >= 0
            best[d] = np.minimum(best[d], env_min[e[d]] + 1)
        new = np.minimum(dist, best)
        if np.array_equal(new, dist):
            break
        dist = new
    return FitnessTable("robustness", _readonly(dist), cap)


def controllability_values(game: GameGraph, memory: int, delay_max: int) -> FitnessTable:
    """Largest delay up to ``delay_max`` at which a state keeps a nonempty entry
    for some register (memory ``min(d, memory)`` at layer d); -1 outside W."""
    if delay_max < 0:
        raise InvalidConfig("delay_max must be nonnegative")
    values = np.full(game.n_ag, -1, dtype=np.int64)
    for d, _, table, _, _ in delayed_layers(game, delay_max, min(memory, delay_max)):
        ok = np.any(table != 0, axis=1)
        values[ok] = d
    return FitnessTable("controllability", _readonly(values))


def forward_multiset(game: GameGraph, state: int, register: Sequence[int], k: int) -> Counter:
    """Agent states reached after ``k`` agent+environment steps from ``state``.

    The last ``len(register)`` actions are fixed by the register (oldest
    first); earlier actions range over every enabled action.  Each endpoint
    is counted once per distinct path.
    """
    register = tuple(int(a) for a in register)
    if len(register) > k:
        raise InvalidInput("register longer than the number of steps")
    counts = Counter({int(state): 1})
    free = k - len(register)
    for i in range(k):
        nxt = Counter()
        for s, c in counts.items():
            actions = game.enabled(s) if i < free else [register[i - free]]
            for a in actions:
                e = game.agent_next[s, a]
                if e < 0:
                    continue
                for s2 in game.env_successors(e):
                    nxt[int(s2)] += c
        counts = nxt
    return counts


def expected_fitness(game: GameGraph, fitness: FitnessTable, state: int,
                     register: Sequence[int], k: int) -> Fraction | None:
    """Mean fitness over the k-forward multiset; None when it is empty."""
    ms = forward_multiset(game, state, register, k)
    total = sum(ms.values())
    if total == 0:
        return None
    return Fraction(sum(int(fitness.values[s]) * c for s, c in ms.items()), total)


class FitnessDeterminization:
    """Deterministic choice inside a maximally permissive strategy that
    maximizes the mean fitness over the forward multiset of the candidate.

    A candidate ``y`` at ``(state, register)`` is scored over
    ``F_{delay+1}(state, register + [y])``; ties go to the lowest action id.
    Before the first observation the score averages over all initial agent
    states.  Choices are computed lazily and cached.
    """

    def __init__(self, strategy: MaxPermStrategy, fitness: FitnessTable, game: GameGraph):
        self.strategy = strategy
        self.fitness = fitness
        self.game = game
        self._cache: dict = {}

    def _score(self, starts, register, y, steps):
        total, weight = 0, 0
        for s in starts:
            ms = forward_multiset(self.game, s, tuple(register) + (y,), steps)
            total += sum(int(self.fitness.values[t]) * c for t, c in ms.items())
            weight += sum(ms.values())
        return Fraction(total, weight) if weight else None

    def choose(self, state: int | None, register: Sequence[int] = ()) -> int:
        key = (state, tuple(register))
        if key in self._cache:
            return self._cache[key]
        allowed = sorted(self.strategy.allowed(state, register))
        if not allowed:
            raise InfeasibleState(f"empty allowed set at state {state}, register {tuple(register)}")
        if state is None:
            starts = list(self.game.initial_agent_states())
            steps = len(register) + 1
        else:
            starts = [state]
            steps = self.strategy.delay + 1
        best, best_score = allowed[0], None
        if len(allowed) > 1:
            for y in allowed:
                score = self._score(starts, register, y, steps)
                if score is not None and (best_score is None or score > best_score):
                    best, best_score = y, score
        self._cache[key] = best
        return best

    def table(self) -> dict[tuple[int, tuple[int, ...]], int]:
        """Materialize every nonempty steady-state entry."""
        out = {}
        for s in range(self.game.n_ag):
            for reg in self.strategy.registers():
                if self.strategy.allowed_mask(s, reg):
                    out[(s, reg)] = self.choose(s, reg)
        return out


def determinize_max_fitness(strategy: MaxPermStrategy, fitness: FitnessTable,
                            game: GameGraph) -> FitnessDeterminization:
    return FitnessDeterminization(strategy, fitness, game)


def extract_shields(strategy: MaxPermStrategy, determinization) -> tuple[PreShield, PostShield]:
    """Pre- and post-shields from a strategy.

    Shields take the action register as history and the delayed observation
    (an agent state id, or None before the first observation) as input.
    """

    def allowed(register, state):
        got = strategy.allowed(state, register)
        if not got:
            raise InfeasibleState(f"empty allowed set at state {state}, register {tuple(register)}")
        return got

    def correct(register, state, action):
        if action in allowed(register, state):
            return action
        return determinization.choose(state, register)

    return (PreShield(allowed, strategy.n_actions), PostShield(correct, strategy.n_actions))


# --------------------------------------------------------------------------
# strategy export

def _fmt_reg(reg):
    return " ".join(map(str, reg))


def write_strategy_csv(strategy: MaxPermStrategy, path) -> None:
    """CSV ``state,register,allowed``; transient rows use ``eps`` as state."""
    rows = ["state,register,allowed"]
    for k, level in enumerate(strategy.transient):
        for reg in _registers(strategy.n_actions, k):
            mask = level[strategy.register_index(reg)]
            rows.append(f"eps,{_fmt_reg(reg)},{_fmt_reg(sorted(_mask_to_set(mask)))}")
    for s in range(strategy.table.shape[0]):
        for reg in strategy.registers():
            mask = strategy.table[s, strategy.register_index(reg)]
            rows.append(f"{s},{_fmt_reg(reg)},{_fmt_reg(sorted(_mask_to_set(mask)))}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def read_strategy_csv(path) -> dict[tuple[int | None, tuple[int, ...]], frozenset[int]]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "state,register,allowed":
            raise InvalidConfig(f"{path}: unexpected header {header!r}")
        for line in fh:
            state, reg, allowed = line.rstrip("\n").split(",")
            key = (None if state == "eps" else int(state), tuple(int(x) for x in reg.split()))
            out[key] = frozenset(int(x) for x in allowed.split())
    return out
