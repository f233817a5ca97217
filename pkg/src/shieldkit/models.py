"""Builders for the benchmark environments.

* Gridworlds: the small perturbed-robot world with two unsafe cells and the
  dead-end world where a kid chases a robot, plus a treasure-collecting
  simulation that runs delayed shields against a stochastic kid.
* Crossing games: a car approaching an intersection with another car, or a
  crosswalk with a pedestrian, as safety games.
* The car plus pedestrian product MDP fitted from bundled synthetic samples.
* The traffic MDP for intention analysis with three driver policies.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from .errors import InfeasibleSynthesis, InvalidConfig, InvalidInput
from .intention import FactoredScenario, LabeledMdp, PeripheralVar, ScenarioInstance
from .mdp_engine import Mdp, Policy, fit_transitions, pedestrian_chain, product
from .safety_game import (GameGraph, MaxPermStrategy, controllability_values,
                          determinize_max_fitness, robustness_values, solve_delayed)

# --------------------------------------------------------------------------
# gridworlds

UNIT_MOVES = {"U": (0, 1), "D": (0, -1), "R": (1, 0), "L": (-1, 0), "N": (0, 0)}
BASIC_ACTIONS = ("U", "D", "R", "L", "N")
RICH_ACTIONS = BASIC_ACTIONS + ("UU", "DD", "RR", "LL", "UR", "RU", "UL", "LU", "DR", "RD",
                                "DL", "LD", "UUR", "UUL", "DDR", "DDL", "RRU", "RRD",
                                "LLU", "LLD")
KID_ACTIONS = ("U", "D", "R", "L")


@dataclass(frozen=True)
class GridworldSpec:
    """Grid of ``width`` x ``height`` cells with 1-based coordinates.

    ``variant="perturbed"``: one robot; the agent moves it and then the
    environment perturbs it by one of the five unit moves.  ``unsafe`` lists
    the unsafe cells.  ``variant="chase"``: a robot (agent) and a kid
    (environment) with the kid to move first; unsafe states are collisions.
    ``walls`` are blocked cells.  ``initial`` is the robot cell (perturbed) or
    ``(robot, kid)`` (chase).
    """

    width: int = 7
    height: int = 9
    variant: str = "perturbed"
    unsafe: tuple = ((4, 4), (6, 7))
    walls: tuple = ()
    robot_actions: str = "basic"
    initial: tuple = (1, 9)
    dead_ends: int | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidConfig("grid dimensions must be at least 1")
        if self.variant not in ("perturbed", "chase"):
            raise InvalidConfig(f"unknown gridworld variant {self.variant!r}")
        if self.robot_actions not in ("basic", "rich"):
            raise InvalidConfig("robot actions must be 'basic' or 'rich'")
        for x, y in tuple(self.unsafe) + tuple(self.walls):
            if not (1 <= x <= self.width and 1 <= y <= self.height):
                raise InvalidConfig(f"cell ({x}, {y}) outside the grid")


def example_gridworld_spec() -> GridworldSpec:
    """The 7 x 9 world with unsafe cells (4,4) and (6,7), starting at (1,9)."""
    return GridworldSpec()


def dead_end_walls(n: int) -> tuple[tuple[int, int], ...]:
    """Horizontal wall at y=5 for x in 3..3n+3 and vertical walls x=3+3k, y in 3..7."""
    cells = {(x, 5) for x in range(3, 3 * n + 4)}
    cells |= {(3 + 3 * k, y) for k in range(n + 1) for y in range(3, 8)}
    return tuple(sorted(cells))


def dead_end_spec(n: int = 2, robot_actions: str = "basic") -> GridworldSpec:
    """Chase world of size (3n+4) x 9 with 2n dead ends; robot at (1,1), kid at (3n+4, 9)."""
    if n < 0:
        raise InvalidConfig("number of dead-end pairs must be nonnegative")
    w = 3 * n + 4
    return GridworldSpec(width=w, height=9, variant="chase", unsafe=(),
                         walls=dead_end_walls(n), robot_actions=robot_actions,
                         initial=((1, 1), (w, 9)), dead_ends=n)


class GridLayout:
    """Free cells of a gridworld, moves and shortest-path distances."""

    def __init__(self, spec: GridworldSpec):
        self.spec = spec
        walls = set(map(tuple, spec.walls))
        self.cells = [(x, y) for x in range(1, spec.width + 1) for y in range(1, spec.height + 1)
                      if (x, y) not in walls]
        self.index = {c: i for i, c in enumerate(self.cells)}
        self.n = len(self.cells)
        names = BASIC_ACTIONS if spec.robot_actions == "basic" else RICH_ACTIONS
        self.robot_actions = names
        self.robot_move = np.array([[self._apply(i, m) for m in names] for i in range(self.n)],
                                   dtype=np.int64)
        self.unit_move = np.array([[self._apply(i, m) for m in BASIC_ACTIONS] for i in range(self.n)],
                                  dtype=np.int64)
        self.kid_move = self.unit_move[:, :4]
        adj = sp.lil_matrix((self.n, self.n))
        for i in range(self.n):
            for j in self.unit_move[i, :4]:
                if j != i:
                    adj[i, j] = 1
        self.dist = shortest_path(adj.tocsr(), unweighted=True)

    def _apply(self, i: int, move: str) -> int:
        """Cell after a (multi-step) move; an illegal move leaves the cell unchanged."""
        x, y = self.cells[i]
        for ch in move:
            dx, dy = UNIT_MOVES[ch]
            x, y = x + dx, y + dy
            if (x, y) not in self.index:
                return i
        return self.index[(x, y)]

    def cell_id(self, x: int, y: int) -> int:
        if (x, y) not in self.index:
            raise InvalidInput(f"cell ({x}, {y}) is not a free cell")
        return self.index[(x, y)]

    # chase states
    def state_id(self, robot: int, kid: int) -> int:
        return robot * self.n + kid

    def decode(self, s: int) -> tuple[int, int]:
        return divmod(int(s), self.n)


def build_gridworld(spec: GridworldSpec) -> GameGraph:
    """Safety game of a gridworld; illegal moves become the no-move action."""
    lay = GridLayout(spec)
    names = lay.robot_actions
    if spec.variant == "perturbed":
        n = lay.n
        src = np.repeat(np.arange(n), 5)
        dst = lay.unit_move.ravel()
        bad = np.zeros(n, dtype=bool)
        for c in spec.unsafe:
            bad[lay.cell_id(*c)] = True
        init = lay.cell_id(*spec.initial)
        return GameGraph.from_arrays(n, n, len(names), src, dst, lay.robot_move, ~bad, ~bad,
                                     init, names)
    n = lay.n
    N = n * n
    r = np.repeat(np.arange(n), n)
    k = np.tile(np.arange(n), n)
    # environment (kid) moves: (r, k) -> (r, k')
    src = np.repeat(np.arange(N), 4)
    dst = (r[:, None] * n + lay.kid_move[k]).ravel()
    # agent (robot) moves: (r, k), a -> (r', k)
    nxt = lay.robot_move[r] * n + k[:, None]
    safe = r != k
    (rx, ry), (kx, ky) = spec.initial
    init = lay.state_id(lay.cell_id(rx, ry), lay.cell_id(kx, ky))
    return GameGraph.from_arrays(N, N, len(names), src, dst, nxt, safe, safe, init, names)


@dataclass(frozen=True, eq=False)
class GridworldShield:
    """A delayed shield for a chase gridworld: strategy plus optional determinization."""

    spec: GridworldSpec
    layout: GridLayout
    game: GameGraph
    delay: int
    kind: str
    strategy: MaxPermStrategy | None
    determinization: object | None = None


SHIELD_KINDS = ("pre", "post-robustness", "post-controllability", "none")


def prepare_gridworld_shield(spec: GridworldSpec, delay: int, kind: str = "pre",
                             delay_max: int = 3) -> GridworldShield:
    """Synthesize the maximally permissive delayed strategy (memory = delay)
    and, for post-shields, the fitness determinization."""
    if spec.variant != "chase":
        raise InvalidConfig("simulation needs the chase gridworld")
    if kind not in SHIELD_KINDS:
        raise InvalidConfig(f"unknown shield kind {kind!r}")
    if delay < 0:
        raise InvalidConfig("delay must be nonnegative")
    lay = GridLayout(spec)
    game = build_gridworld(spec)
    if kind == "none":
        return GridworldShield(spec, lay, game, delay, kind, None)
    strat = solve_delayed(game, delay, delay)
    if not (strat.win_env[game.initial] if delay == 0 else strat.allowed(None, ())):
        raise InfeasibleSynthesis(f"no winning strategy from the initial state at delay {delay}")
    det = None
    if kind == "post-robustness":
        det = determinize_max_fitness(strat, robustness_values(game), game)
    elif kind == "post-controllability":
        det = determinize_max_fitness(strat, controllability_values(game, delay_max, delay_max), game)
    return GridworldShield(spec, lay, game, delay, kind, strat, det)


@dataclass
class GridworldRun:
    score: int = 0
    interventions: int = 0
    violations: int = 0
    steps: int = 0
    log: list = field(default_factory=list)


def _argmin_random(values: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(values == values.min())
    return int(best[rng.integers(best.size)])


def simulate_gridworld(shield: GridworldShield, steps: int = 2000, seed: int = 0,
                       chase_prob: float = 0.7, greedy_prob: float = 0.9,
                       record: bool = False) -> GridworldRun:
    """Treasure hunt with a chasing kid, shielded by a delayed shield.

    Each step the kid moves (towards the robot with probability
    ``chase_prob``, uniformly otherwise), then the robot acts.  The robot
    heads for the treasure with probability ``greedy_prob`` and moves
    uniformly otherwise.  The shield sees the state ``delay`` steps late
    together with the robot actions since then.  A pre-shield counts an
    intervention whenever it removes some action; a post-shield whenever it
    rewrites the proposal.  Collecting a treasure scores one point and
    respawns it uniformly on a free cell.
    """
    strat = shield.strategy
    lay, delay = shield.layout, shield.delay
    A = len(lay.robot_actions)
    if strat is not None and (strat.delay != delay or strat.n_actions != A
                              or shield.game.n_ag != lay.n * lay.n):
        raise InvalidConfig("shield does not match the game (delay or alphabet)")
    if not 0 <= chase_prob <= 1 or not 0 <= greedy_prob <= 1:
        raise InvalidConfig("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    (rx, ry), (kx, ky) = shield.spec.initial
    robot, kid = lay.cell_id(rx, ry), lay.cell_id(kx, ky)

    def new_treasure():
        while True:
            c = int(rng.integers(lay.n))
            if c != robot:
                return c

    treasure = new_treasure()
    run = GridworldRun()
    history: list[int] = []
    actions: list[int] = []
    full = frozenset(range(A))
    for t in range(steps):
        # kid
        if rng.random() < chase_prob:
            kid = int(lay.kid_move[kid][_argmin_random(lay.dist[lay.kid_move[kid], robot], rng)])
        else:
            kid = int(lay.kid_move[kid][rng.integers(4)])
        if kid == robot:
            run.violations += 1
        history.append(lay.state_id(robot, kid))
        # shield input
        if t >= delay:
            obs, reg = history[t - delay], tuple(actions[t - delay:t])
        else:
            obs, reg = None, tuple(actions)
        allowed = full if strat is None else strat.allowed(obs, reg)
        # robot proposal over its candidate set
        cand = np.array(sorted(allowed if shield.kind == "pre" else full))
        if rng.random() < greedy_prob:
            a = int(cand[_argmin_random(lay.dist[lay.robot_move[robot, cand], treasure], rng)])
        else:
            a = int(cand[rng.integers(cand.size)])
        proposal = a
        if shield.kind == "pre":
            if allowed != full:
                run.interventions += 1
        elif shield.kind.startswith("post") and a not in allowed:
            a = int(shield.determinization.choose(obs, reg))
            run.interventions += 1
        actions.append(a)
        robot = int(lay.robot_move[robot, a])
        if robot == kid:
            run.violations += 1
        if robot == treasure:
            run.score += 1
            treasure = new_treasure()
        if record:
            run.log.append((t, lay.cells[robot], lay.cells[kid], lay.robot_actions[proposal],
                            lay.robot_actions[a], run.score, run.interventions))
        run.steps += 1
    return run


def write_gridworld_log(run: GridworldRun, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "robot_x", "robot_y", "kid_x", "kid_y", "proposed", "executed",
                    "score", "interventions"])
        for t, (rx, ry), (kx, ky), p, a, sc, iv in run.log:
            w.writerow([t, rx, ry, kx, ky, p, a, sc, iv])


# --------------------------------------------------------------------------
# crossing games

ACCELERATE, BRAKE, COAST = 0, 1, 2
CAR_ACTIONS = ("a", "b", "c")


@dataclass(frozen=True)
class CrossingSpec:
    """Discretization of the crossing games.

    Positions are distances to the crossing on the grid ``0, p_step, ...,
    p_max``; an extra index marks a car that has passed.  Velocities are
    ``0..v_max``.  One step lasts ``dt`` seconds and pedals apply an
    acceleration of magnitude ``accel``.  The pedestrian lives on the grid
    ``0, ped_step, ..., p_max`` and moves at most one cell per step.
    ``initial`` is ``(car position, car speed, other position, other speed)``;
    the pedestrian game uses the car part and ``ped_initial``.
    """

    p_max: float = 100.0
    p_step: float = 2.0
    v_max: int = 20
    dt: float = 0.5
    accel: float = 2.0
    ped_step: float = 1.0
    danger_speed: float = 2.0
    danger_dist: float = 5.0
    initial: tuple = (100.0, 10, 100.0, 10)
    ped_initial: float = 50.0

    def __post_init__(self):
        if self.p_step <= 0 or self.p_max < 0 or self.v_max < 0 or self.dt <= 0:
            raise InvalidConfig("crossing grids must be nonempty with positive steps")
        if abs(self.p_max / self.p_step - round(self.p_max / self.p_step)) > 1e-9:
            raise InvalidConfig("p_max must be a multiple of p_step")
        dv = self.accel * self.dt
        if abs(dv - round(dv)) > 1e-9 or round(dv) < 1:
            raise InvalidConfig("accel * dt must be a positive whole velocity step")

    @property
    def n_pos(self) -> int:
        return int(round(self.p_max / self.p_step)) + 1

    @property
    def n_vel(self) -> int:
        return self.v_max + 1

    @property
    def n_ped(self) -> int:
        return int(round(self.p_max / self.ped_step)) + 1

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.n_pos) * self.p_step


def car_step(spec: CrossingSpec, p_idx, v, action):
    """Deterministic part of a car update.

    Returns ``(p_idx', v')`` where ``v'`` is the velocity before the extra
    braking loss (braking removes one more unit at the environment's
    choice).  Positions round towards the crossing; a car crossing position 0
    stops there for one step and then has passed (index ``n_pos``).
    """
    p_idx = np.asarray(p_idx)
    v = np.asarray(v)
    passed = p_idx >= spec.n_pos
    a = {ACCELERATE: spec.accel, BRAKE: -spec.accel, COAST: 0.0}[action]
    p = p_idx * spec.p_step
    pn = p - v * spec.dt - 0.5 * a * spec.dt ** 2
    idx = np.floor(pn / spec.p_step + 1e-9).astype(np.int64)
    idx = np.where((pn < 0) & (p > 0), 0, idx)
    idx = np.where((pn < 0) & (p <= 0), spec.n_pos, idx)
    idx = np.minimum(idx, spec.n_pos - 1)
    idx = np.where((pn < 0) & (p <= 0), spec.n_pos, idx)
    idx = np.where(passed, spec.n_pos, idx)
    dv = int(round(spec.accel * spec.dt))
    vn = {ACCELERATE: v + dv, BRAKE: v - dv, COAST: v}[action]
    vn = np.clip(vn, 0, spec.v_max)
    return idx, vn


class CrossingLayout:
    """State numbering of a crossing game.

    Car-car agent state ``(pa, va, pe, ve)``; environment state additionally
    carries the pending-brake flag of the agent's car.  Car-pedestrian agent
    state ``(pa, va, pp)``.  Position index ``n_pos`` marks a passed car.
    """

    def __init__(self, spec: CrossingSpec, variant: str):
        if variant not in ("car-car", "car-pedestrian"):
            raise InvalidConfig(f"unknown crossing variant {variant!r}")
        self.spec, self.variant = spec, variant
        P, V = spec.n_pos + 1, spec.n_vel
        self.shape = (P, V, P, V) if variant == "car-car" else (P, V, spec.n_ped)
        self.n_ag = int(np.prod(self.shape))
        self.n_env = 2 * self.n_ag

    def agent_id(self, *coords) -> int:
        return int(np.ravel_multi_index(tuple(int(c) for c in coords), self.shape))

    def env_id(self, flag: int, *coords) -> int:
        return int(flag) * self.n_ag + self.agent_id(*coords)

    def decode(self, s: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(int(s) % self.n_ag, self.shape))

    def pos_index(self, p: float) -> int:
        i = p / self.spec.p_step
        if abs(i - round(i)) > 1e-9 or not 0 <= round(i) < self.spec.n_pos:
            raise InvalidInput(f"position {p} not on the grid")
        return int(round(i))

    def ped_index(self, p: float) -> int:
        i = p / self.spec.ped_step
        if abs(i - round(i)) > 1e-9 or not 0 <= round(i) < self.spec.n_ped:
            raise InvalidInput(f"pedestrian position {p} not on the grid")
        return int(round(i))


def _crossing_unsafe(lay: CrossingLayout, coords):
    spec = lay.spec
    if lay.variant == "car-car":
        pa, _, pe, _ = coords
        return (pa == 0) & (pe == 0)
    pa, va, pp = coords
    car_p = pa * spec.p_step
    ped_p = pp * spec.ped_step
    on_road = pa < spec.n_pos
    return (on_road & (va > spec.danger_speed) & (np.abs(car_p - ped_p) < spec.danger_dist)
            & (ped_p < car_p))


def build_crossing_game(spec: CrossingSpec = CrossingSpec(), variant: str = "car-car") -> GameGraph:
    """Safety game of a car approaching a crossing (against another car) or a
    crosswalk (against a pedestrian).

    Agent actions are accelerate, brake and coast.  Braking lowers the speed
    by one or two units; the environment picks which.  The other car has the
    same dynamics with all its choices controlled by the environment; the
    pedestrian moves by at most one cell per step.
    """
    lay = CrossingLayout(spec, variant)
    coords = np.unravel_index(np.arange(lay.n_ag), lay.shape)
    pa, va = coords[0], coords[1]
    nxt = np.empty((lay.n_ag, 3), dtype=np.int64)
    for a in (ACCELERATE, BRAKE, COAST):
        p2, v2 = car_step(spec, pa, va, a)
        flag = int(a == BRAKE)
        rest = coords[2:]
        nxt[:, a] = flag * lay.n_ag + np.ravel_multi_index((p2, v2) + tuple(rest), lay.shape)
    # environment states: flag * n_ag + agent-shaped coordinates
    e_ids = np.arange(lay.n_env)
    flag = e_ids // lay.n_ag
    ec = np.unravel_index(e_ids % lay.n_ag, lay.shape)
    src, dst = [], []
    dv = int(round(spec.accel * spec.dt))
    for extra in (0, 1):
        va2 = np.maximum(ec[1] - extra * dv, 0)
        sel = (flag == 1) | (extra == 0)
        if variant == "car-car":
            for a in (ACCELERATE, BRAKE, COAST):
                pe2, ve2 = car_step(spec, ec[2], ec[3], a)
                for more in ((0, 1) if a == BRAKE else (0,)):
                    ve3 = np.maximum(ve2 - more * dv, 0)
                    tgt = np.ravel_multi_index((ec[0], va2, pe2, ve3), lay.shape)
                    src.append(e_ids[sel])
                    dst.append(tgt[sel])
        else:
            for step in (-1, 0, 1):
                pp2 = np.clip(ec[2] + step, 0, spec.n_ped - 1)
                tgt = np.ravel_multi_index((ec[0], va2, pp2), lay.shape)
                src.append(e_ids[sel])
                dst.append(tgt[sel])
    unsafe_ag = _crossing_unsafe(lay, coords)
    unsafe_env = np.concatenate([_crossing_unsafe(lay, ec_part) for ec_part in
                                 (tuple(c[:lay.n_ag] for c in ec), tuple(c[lay.n_ag:] for c in ec))])
    init = spec.initial
    if variant == "car-car":
        e0 = lay.env_id(0, lay.pos_index(init[0]), init[1], lay.pos_index(init[2]), init[3])
    else:
        e0 = lay.env_id(0, lay.pos_index(init[0]), init[1], lay.ped_index(spec.ped_initial))
    return GameGraph.from_arrays(lay.n_env, lay.n_ag, 3, np.concatenate(src), np.concatenate(dst),
                                 nxt, ~unsafe_env, ~unsafe_ag, e0, CAR_ACTIONS)


# --------------------------------------------------------------------------
# four-state MDP where a threshold shield lets an agent fail arbitrarily often

def counterexample_mdp(eps: float = 0.5, delta: float = 0.1) -> Mdp:
    """States ``s0..s3``, actions ``a, b``.

    In ``s0``, ``a`` reaches ``s3`` with probability ``1 - eps`` and returns
    to ``s0`` otherwise; ``b`` reaches ``s3`` with probability ``delta`` and
    ``s1`` otherwise.  ``s1`` moves to the absorbing ``s2``; ``s3`` is
    absorbing and labelled ``bad``.
    """
    if not (0 < eps < 1 and 0 < delta < 1):
        raise InvalidConfig("eps and delta must lie in (0, 1)")
    rows = [(0, 0, 3, 1 - eps), (0, 0, 0, eps), (0, 1, 3, delta), (0, 1, 1, 1 - delta),
            (1, 0, 2, 1.0), (2, 0, 2, 1.0), (3, 0, 3, 1.0)]
    return Mdp.from_transitions(4, 2, rows, labels={"bad": [3]},
                                state_names=["s0", "s1", "s2", "s3"], action_names=["a", "b"])


def counterexample_reach(p_a: float, eps: float, delta: float) -> float:
    """Closed-form probability of reaching ``s3`` from ``s0`` when ``a`` is
    taken with probability ``p_a``."""
    return 1.0 - (1.0 - p_a) * (1.0 - delta) / (1.0 - p_a * eps)


# --------------------------------------------------------------------------
# car plus pedestrian product MDP

PEDESTRIAN_SIGMA = {"elder": 1.0, "adult": 2.0, "child": 3.0}
DEFAULT_CAR_ACTIONS = (-0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75)
DEFAULT_REF_VELOCITIES = tuple(range(11))


def synthetic_car_samples(seed: int = 0, n: int = 100, actions=DEFAULT_CAR_ACTIONS,
                          velocities=DEFAULT_REF_VELOCITIES, dt: float = 1.0) -> list[tuple]:
    """Synthetic ``(initial_speed, command, dx, dv)`` samples of a simple car.

    Throttle accelerates by ``2.5 * command`` m/s^2 and the brake decelerates
    by ``4 * |command|`` m/s^2, with Gaussian noise; a braking car stops at
    speed zero.
    """
    rng = np.random.default_rng(seed)
    out = []
    for u in velocities:
        for cmd in actions:
            gain = 2.5 if cmd >= 0 else 4.0
            acc = gain * cmd + rng.normal(0, 0.15, n)
            dv = np.maximum(acc * dt, -float(u))
            dx = np.maximum(u * dt + 0.5 * dv * dt + rng.normal(0, 0.05, n), 0.0)
            out.extend((float(u), float(cmd), float(x), float(d)) for x, d in zip(dx, dv))
    return out


def load_car_samples() -> list[tuple]:
    """Bundled synthetic samples (same generator as :func:`synthetic_car_samples`)."""
    path = resources.files("shieldkit").joinpath("data/car_samples.csv")
    with path.open() as fh:
        reader = csv.DictReader(fh)
        return [(float(r["speed"]), float(r["command"]), float(r["dx"]), float(r["dv"]))
                for r in reader]


def write_car_samples(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["speed", "command", "dx", "dv"])
        for row in samples:
            w.writerow([repr(v) for v in row])


def build_car_pedestrian_mdp(sigma: float | str = "adult", x_max: int = 30, v_max: int = 10,
                             ped_y_max: int = 6, lane_y: int = 3, samples=None,
                             actions=DEFAULT_CAR_ACTIONS, mu_pos: float = 0.5,
                             mu_vel: float = 0.5, crash_dx: int = 1, crash_dy: int = 1) -> Mdp:
    """Product of the fitted car MDP and the pedestrian chain.

    State ``(car, ped)`` has id ``car * n_ped + ped`` with car id
    ``X * (v_max + 1) + V`` and pedestrian id ``x * (ped_y_max + 1) + y``.
    The label ``crash`` marks pedestrians within ``crash_dx`` cells of the
    car along the road and ``crash_dy`` cells of its lane.
    """
    if isinstance(sigma, str):
        if sigma not in PEDESTRIAN_SIGMA:
            raise InvalidConfig(f"unknown pedestrian persona {sigma!r}")
        sigma = PEDESTRIAN_SIGMA[sigma]
    if not 0 <= lane_y <= ped_y_max:
        raise InvalidConfig("lane must lie inside the pedestrian grid")
    samples = load_car_samples() if samples is None else samples
    fitted = fit_transitions(samples, actions, DEFAULT_REF_VELOCITIES, mu_pos, mu_vel)
    car = fitted.to_mdp(x_max, v_max)
    ped = pedestrian_chain(x_max, ped_y_max, sigma, mu_pos=mu_pos)
    m = product(car, ped)
    nv, ny = v_max + 1, ped_y_max + 1
    ids = np.arange(m.n_states)
    c, pd = np.divmod(ids, ped.n_states)
    X = c // nv
    px, py = np.divmod(pd, ny)
    crash = (np.abs(px - X) <= crash_dx) & (np.abs(py - lane_y) <= crash_dy)
    return Mdp(m.n_states, m.n_actions, m.pair_state, m.pair_action, m.state_ptr, m.P,
               {"crash": frozenset(np.flatnonzero(crash).tolist())}, None, car.action_names)


# --------------------------------------------------------------------------
# traffic MDP for intention analysis

TRAFFIC_ACTIONS = ("brake", "accelerate", "coast")
TRAFFIC_POLICIES = ("opportunistic", "reckless", "cautious")


@dataclass(frozen=True)
class TrafficSpec:
    """Street of length ``x_max`` with the car in lane ``car_y`` and a
    crosswalk at ``crosswalk``; the pedestrian stays within ``ped_window`` of
    the crosswalk along the street and within ``0..ped_y_max`` across it.

    Peripheral variables: slippery stretch ``[sl_init, sl_end]`` with factor
    ``sl_fact`` (1 means not slippery), pedestrian hesitancy ``h_fact`` (0
    never steps into the car's path) and the visibility block ``vis``.
    """

    x_max: int = 60
    v_max: int = 5
    car_y: int = 8
    road: tuple = (3, 13)
    crosswalk: int = 40
    ped_window: int = 10
    ped_y_max: int = 15
    sl_init: float = 20.0
    sl_end: float = 45.0
    sl_fact: float = 2.5
    h_fact: float = 0.5
    vis: int = 1
    hit_radius: int = 5
    collision: str = "and"
    stop_range: float = 15.0
    view_range: int = 10
    cruise_speed: int = 3

    def __post_init__(self):
        if self.sl_fact < 1:
            raise InvalidConfig("slipperiness factor must be at least 1")
        if not 0 <= self.h_fact <= 1:
            raise InvalidConfig("hesitancy must lie in [0, 1]")
        if self.vis not in (0, 1):
            raise InvalidConfig("visibility flag must be 0 or 1")
        if self.collision not in ("and", "or"):
            raise InvalidConfig("collision predicate must be 'and' or 'or'")
        lo = self.crosswalk - self.ped_window
        hi = self.crosswalk + self.ped_window
        if lo < 0 or hi > self.x_max:
            raise InvalidConfig("pedestrian window must lie on the street")

    def with_peripherals(self, values: dict) -> "TrafficSpec":
        v = dict(values)
        if "vis" in v:
            v["vis"] = int(round(v["vis"]))
        return replace(self, **v)

    @property
    def ped_x(self) -> np.ndarray:
        return np.arange(self.crosswalk - self.ped_window, self.crosswalk + self.ped_window + 1)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.x_max + 1, self.v_max + 1, self.ped_x.size, self.ped_y_max + 1)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.shape))


TRAFFIC_INTEGRAL = ("car_x", "car_v", "ped_x", "ped_y")
TRAFFIC_PERIPHERAL_RANGES = {"sl_init": (10.0, 30.0), "sl_end": (35.0, 55.0), "sl_fact": (1.0, 4.0),
                             "h_fact": (0.1, 0.9), "vis": (0, 1)}


def traffic_state_id(spec: TrafficSpec, car_x: int, car_v: int, ped_x: int, ped_y: int) -> int:
    px = ped_x - (spec.crosswalk - spec.ped_window)
    coords = (car_x, car_v, px, ped_y)
    for c, n in zip(coords, spec.shape):
        if not 0 <= c < n:
            raise InvalidInput(f"traffic state {(car_x, car_v, ped_x, ped_y)} outside the model")
    return int(np.ravel_multi_index(coords, spec.shape))


def traffic_decode(spec: TrafficSpec, s) -> tuple:
    cx, v, px, py = np.unravel_index(s, spec.shape)
    return cx, v, px + spec.crosswalk - spec.ped_window, py


def _velocity_outcomes(spec: TrafficSpec, slippery: np.ndarray, v: np.ndarray, action: int):
    """Three (velocity, probability) columns per state for one action."""
    vm = spec.v_max
    if action == 2:  # coast: keep or lose one unit
        outs = [(v, 0.5), (v - 1, 0.5), (v, 0.0)]
        vals = [np.clip(o, 0, vm) for o, _ in outs]
        probs = [np.full(v.shape, p) for _, p in outs]
        return vals, probs
    sign = -1 if action == 0 else 1
    q = 1.0 - 1.0 / spec.sl_fact
    kmax = 2 if spec.sl_fact < 2 else 1
    small = np.clip(v + sign * 1, 0, vm)
    big_normal = np.clip(v + sign * 2, 0, vm)
    big_slip = np.clip(v + sign * min(2, kmax), 0, vm)
    vals = [np.where(slippery, v, small), small, np.where(slippery, big_slip, big_normal)]
    p0 = np.where(slippery, q, 0.0)
    p1 = np.where(slippery, (1 - q) * 0.5, 0.5)
    p2 = np.where(slippery, (1 - q) * 0.5, 0.5)
    return vals, [p0, p1, p2]


def _ped_outcomes(spec: TrafficSpec, car_next_x, px, py):
    """Five (x, y, probability) columns of the pedestrian step."""
    moves = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
    lo, hi = spec.ped_x[0], spec.ped_x[-1]
    at_goal = py >= spec.ped_y_max
    on_start_side = py < spec.road[0]
    toward_x = np.sign(spec.crosswalk - px)
    R = spec.hit_radius

    def danger(tx, ty):
        return (np.abs(ty - spec.car_y) <= R) & (tx >= car_next_x - R)

    xs, ys, ws = [], [], []
    for dx, dy in moves:
        tx, ty = px + dx, py + dy
        ok = (tx >= lo) & (tx <= hi) & (ty >= 0) & (ty <= spec.ped_y_max)
        if (dx, dy) != (0, 0):
            ok &= ~at_goal
        pref = np.where(on_start_side & (toward_x != 0), (dx == toward_x) & (dy == 0),
                        (dx == 0) & (dy == 1))
        w = np.where(ok, np.where(pref, 4.0, 1.0), 0.0)
        xs.append(np.where(ok, tx, px))
        ys.append(np.where(ok, ty, py))
        ws.append(w)
    base = np.stack(ws)
    hes = np.stack([np.where(danger(x, y), spec.h_fact, 1.0) for x, y in zip(xs, ys)])
    w = base * hes
    tot = w.sum(axis=0)
    w = np.where(tot > 0, w / np.where(tot > 0, tot, 1), base / base.sum(axis=0))
    return xs, ys, list(w)


def collision_mask(spec: TrafficSpec) -> np.ndarray:
    cx, _, px, py = traffic_decode(spec, np.arange(spec.n_states))
    near_x = np.abs(px - cx) <= spec.hit_radius
    near_y = np.abs(py - spec.car_y) <= spec.hit_radius
    return (near_x & near_y) if spec.collision == "and" else (near_x | near_y)


def build_traffic_mdp(spec: TrafficSpec = TrafficSpec()) -> LabeledMdp:
    """Traffic MDP with car and pedestrian moving simultaneously.

    The car advances by its speed, then its speed changes per the action:
    braking and accelerating change it by one or two units with equal
    probability, coasting keeps it or loses one unit.  On the slippery
    stretch (``sl_fact > 1``) braking and accelerating have no effect with
    probability ``1 - 1/sl_fact`` and, for ``sl_fact >= 2``, never change the
    speed by two.  The pedestrian walks to the crosswalk and across;
    steps into the car's path are down-weighted by ``h_fact``.  A car at the
    end of the street is absorbing.  Labels: ``collision`` and ``end``; the
    restriction forbids actions that may stop the car when no pedestrian is
    within ``stop_range`` metres (unless every action may stop it).
    """
    n = spec.n_states
    ids = np.arange(n)
    cx, v, px, py = traffic_decode(spec, ids)
    end = cx >= spec.x_max
    car_next = np.minimum(cx + v, spec.x_max)
    slippery = (spec.sl_fact > 1) & (cx >= spec.sl_init) & (cx <= spec.sl_end)
    pxs, pys, pws = _ped_outcomes(spec, car_next, px, py)
    off = spec.crosswalk - spec.ped_window
    rows, cols, data = [], [], []
    may_stop = np.zeros((n, 3), dtype=bool)
    for a in range(3):
        vals, probs = _velocity_outcomes(spec, slippery, v, a)
        pair = ids * 3 + a
        for vv, pv in zip(vals, probs):
            may_stop[:, a] |= (pv > 0) & (vv == 0)
            for x2, y2, pw in zip(pxs, pys, pws):
                p = pv * pw
                tgt = np.ravel_multi_index((car_next, vv, x2 - off, y2), spec.shape)
                keep = (p > 0) & ~end
                rows.append(pair[keep])
                cols.append(tgt[keep])
                data.append(p[keep])
        rows.append(pair[end])
        cols.append(ids[end])
        data.append(np.ones(int(end.sum())))
    P = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(3 * n, n))
    P.sum_duplicates()
    m = Mdp.from_arrays(n, 3, np.repeat(ids, 3), np.tile(np.arange(3), n), P,
                        action_names=TRAFFIC_ACTIONS)
    dist = np.hypot(px - cx, py - spec.car_y)
    no_ped = dist > spec.stop_range
    may_stop[end] = False
    restrict = ~(no_ped[:, None] & may_stop)
    restrict[~restrict.any(axis=1)] = True
    coll = collision_mask(spec)
    return LabeledMdp(m, {"collision": coll, "end": end}, restrict)


def traffic_policy(spec: TrafficSpec, kind: str = "opportunistic",
                   restriction: np.ndarray | None = None) -> Policy:
    """Driver policies (deterministic, memoryless rule sets).

    All drivers cruise: accelerate below ``cruise_speed``, coast otherwise.
    A pedestrian is *targeted* when it is visible, has not finished crossing
    and is no more than ``hit_radius`` behind the car.

    * opportunistic: accelerate towards a targeted pedestrian in the lane
      band, coast once within ``hit_radius`` of it, and brake next to one
      still waiting at the kerb;
    * reckless: cruise regardless of the pedestrian;
    * cautious: within ``3 * hit_radius`` of a targeted pedestrian, brake
      while it is in the lane band and accelerate past it while it still
      waits at the kerb.

    With ``vis = 1`` a pedestrian is visible only within ``view_range``
    metres along the street.  When ``restriction`` is given, a forbidden
    choice falls back to the first allowed action of a fixed preference
    order (coast, accelerate, brake; reckless drivers prefer accelerating).
    """
    if kind not in TRAFFIC_POLICIES:
        raise InvalidConfig(f"unknown driver policy {kind!r}")
    brake, acc, coast = 0, 1, 2
    n = spec.n_states
    cx, v, px, py = traffic_decode(spec, np.arange(n))
    R = spec.hit_radius
    gap = px - cx
    visible = (spec.vis == 0) | (np.abs(gap) <= spec.view_range)
    in_lane = (py >= spec.road[0]) & (py <= spec.road[1])
    at_kerb = py < spec.road[0]
    target = visible & (py <= spec.road[1]) & (gap >= -R)
    choice = np.where(v < spec.cruise_speed, acc, coast)
    order = [coast, acc, brake]
    if kind == "opportunistic":
        choice = np.where(target & in_lane & (gap > R), acc, choice)
        choice = np.where(target & in_lane & (np.abs(gap) <= R), coast, choice)
        choice = np.where(target & at_kerb & (np.abs(gap) <= R + 2), brake, choice)
    elif kind == "cautious":
        zone = target & (gap <= 3 * R)
        choice = np.where(zone & at_kerb, acc, choice)
        choice = np.where(zone & in_lane, brake, choice)
    else:
        order = [acc, coast, brake]
    choice = np.where(cx >= spec.x_max, coast, choice)
    if restriction is not None:
        ok = np.asarray(restriction, dtype=bool)
        bad = ~ok[np.arange(n), choice]
        for a in reversed(order):
            choice = np.where(bad & ok[:, a], a, choice)
    return Policy.deterministic(choice, 3)


def traffic_instance(assignment: dict, spec: TrafficSpec = TrafficSpec(),
                     policy: str = "opportunistic") -> ScenarioInstance:
    """Scenario instance for one peripheral assignment (picklable via partial)."""
    s = spec.with_peripherals(assignment)
    m = build_traffic_mdp(s)
    return ScenarioInstance(m, traffic_policy(s, policy, m.restriction),
                            functools.partial(_traffic_lookup, s))


def _traffic_lookup(spec, step):
    return traffic_state_id(spec, *step)


def traffic_builder(spec: TrafficSpec = TrafficSpec(), policy: str = "opportunistic"):
    return functools.partial(traffic_instance, spec=spec, policy=policy)


def simulate_traffic(spec: TrafficSpec, policy: Policy, start: tuple, steps: int, seed: int,
                     mdp: LabeledMdp | None = None):
    """Sample a trace of integral tuples ``(car_x, car_v, ped_x, ped_y)``;
    ``mdp`` reuses an already built model of ``spec``."""
    m = build_traffic_mdp(spec) if mdp is None else mdp
    rng = np.random.default_rng(seed)
    s = traffic_state_id(spec, *start)
    choice = policy.choice()
    trace = [tuple(int(c) for c in traffic_decode(spec, s))]
    coll = m.states("collision")
    for _ in range(steps):
        if coll[s] or traffic_decode(spec, s)[0] >= spec.x_max:
            break
        succ = m.base.successors(s, int(choice[s]))
        t = [x for x, _ in succ]
        p = np.array([q for _, q in succ])
        s = int(t[rng.choice(len(t), p=p / p.sum())])
        trace.append(tuple(int(c) for c in traffic_decode(spec, s)))
    return trace


def traffic_reference_scenario(spec: TrafficSpec = TrafficSpec(), policy: str = "opportunistic",
                               start: tuple = (0, 3, 38, 0), seed: int = 0,
                               max_tries: int = 500) -> FactoredScenario:
    """Reference scenario: the first seeded run (from ``seed`` on) of the
    policy that ends in a collision, with the peripheral ranges of the study."""
    lm = build_traffic_mdp(spec)
    m_pol = traffic_policy(spec, policy, lm.restriction)
    for k in range(max_tries):
        tr = simulate_traffic(spec, m_pol, start, 200, seed + k, lm)
        cx, v, px, py = tr[-1]
        coll = collision_mask(spec)[traffic_state_id(spec, cx, v, px, py)]
        if coll:
            per = []
            for name, (lo, hi) in TRAFFIC_PERIPHERAL_RANGES.items():
                ref = float(getattr(spec, name))
                if name == "vis":
                    per.append(PeripheralVar(name, ref, 0.0, 1.0, (0.0, 1.0)))
                else:
                    per.append(PeripheralVar(name, ref, lo, hi))
            return FactoredScenario("traffic", "collision", TRAFFIC_INTEGRAL, tuple(per),
                                    tuple(tr), policy)
    raise InvalidConfig("no colliding reference run found")


def gridworld_from_name(name: str, n: int = 2, robot_actions: str = "basic") -> GridworldSpec:
    if name in ("example", "example41", "small"):
        return example_gridworld_spec()
    if name in ("dead-end", "chase"):
        return dead_end_spec(n, robot_actions)
    raise InvalidConfig(f"unknown gridworld {name!r}")


def policy_names() -> Sequence[str]:
    return TRAFFIC_POLICIES


def nearest_grid(value: float, step: float) -> float:
    return math.floor(value / step) * step
