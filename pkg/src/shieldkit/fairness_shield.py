"""Cost-minimal fairness shields for sequences of binary decisions.

Each input is an atom ``(group, recommendation, cost)``; the shield either
follows the recommendation or flips it and pays the cost.  Fairness is
measured from counters:

* DP and DI use ``(n_a, n_a1, n_b, n_b1)``: appeared and accepted per group.
* EqOpp uses six counters ``(n'_a, n'_a1, n'_b, n'_b1, n_z0, pending)``:
  appeared and accepted candidates whose ground truth is 1, candidates with
  ground truth 0, and a pending slot.  Ground truth is revealed right after
  each decision, so the pending slot is always empty between steps.

Groups are encoded as 0 (a) and 1 (b); decisions as 0 (reject) and 1 (accept).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleState, InfeasibleSynthesis, InvalidConfig, InvalidInput

INF = np.inf
TABLE_FORMAT_VERSION = 1
_EPS = 1e-12
PROPERTIES = ("dp", "di", "eqopp")


# --------------------------------------------------------------------------
# inputs and properties

@dataclass(frozen=True, eq=False)
class InputDistribution:
    """Distribution over atoms ``(group, recommendation, cost)``.

    ``p_z1[i]`` is the probability that the candidate of atom ``i`` has
    ground truth 1 (only needed for EqOpp).
    """

    group: np.ndarray
    rec: np.ndarray
    cost: np.ndarray
    prob: np.ndarray
    p_z1: np.ndarray | None = None

    def __post_init__(self):
        g = np.asarray(self.group, dtype=np.int64)
        r = np.asarray(self.rec, dtype=np.int64)
        c = np.asarray(self.cost, dtype=float)
        p = np.asarray(self.prob, dtype=float)
        if not (g.shape == r.shape == c.shape == p.shape) or g.ndim != 1 or g.size == 0:
            raise InvalidConfig("atom arrays must be nonempty and of equal length")
        if np.any((g < 0) | (g > 1)) or np.any((r < 0) | (r > 1)):
            raise InvalidConfig("group and recommendation must be 0 or 1")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvalidConfig("costs must be finite and nonnegative")
        if np.any(p < 0) or abs(p.sum() - 1) > _EPS * max(1, p.size):
            raise InvalidConfig("atom probabilities must be nonnegative and sum to one")
        z = None
        if self.p_z1 is not None:
            z = np.asarray(self.p_z1, dtype=float)
            if z.shape != g.shape or np.any((z < 0) | (z > 1)):
                raise InvalidConfig("ground-truth probabilities must lie in [0, 1]")
            z.setflags(write=False)
        for arr in (g, r, c, p):
            arr.setflags(write=False)
        object.__setattr__(self, "group", g)
        object.__setattr__(self, "rec", r)
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "prob", p)
        object.__setattr__(self, "p_z1", z)

    def __len__(self):
        return self.group.size

    def atom(self, i: int) -> tuple[int, int, float]:
        return int(self.group[i]), int(self.rec[i]), float(self.cost[i])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.group.size, size=n, p=self.prob)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple]) -> "InputDistribution":
        rows = list(rows)
        cols = list(zip(*rows))
        z = cols[4] if len(cols) > 4 else None
        return cls(cols[0], cols[1], cols[2], cols[3], z)


def _group_id(tok: str) -> int:
    tok = tok.strip().lower()
    if tok in ("a", "0"):
        return 0
    if tok in ("b", "1"):
        return 1
    raise InvalidConfig(f"unknown group {tok!r}")


def read_distribution_csv(path) -> InputDistribution:
    """CSV with header ``group,recommendation,cost,probability[,p_z1]``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"group", "recommendation", "cost", "probability"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise InvalidConfig(f"{path}: header must contain {sorted(need)}")
        has_z = "p_z1" in reader.fieldnames
        rows = []
        for line in reader:
            try:
                row = (_group_id(line["group"]), int(line["recommendation"]),
                       float(line["cost"]), float(line["probability"]))
                if has_z:
                    row += (float(line["p_z1"]),)
            except ValueError as exc:
                raise InvalidConfig(f"{path}: bad row {line}") from exc
            rows.append(row)
    if not rows:
        raise InvalidConfig(f"{path}: no atoms")
    return InputDistribution.from_rows(rows)


def write_distribution_csv(theta: InputDistribution, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["group", "recommendation", "cost", "probability"]
        if theta.p_z1 is not None:
            head.append("p_z1")
        w.writerow(head)
        for i in range(len(theta)):
            row = ["ab"[theta.group[i]], int(theta.rec[i]), repr(float(theta.cost[i])),
                   repr(float(theta.prob[i]))]
            if theta.p_z1 is not None:
                row.append(repr(float(theta.p_z1[i])))
            w.writerow(row)


@dataclass(frozen=True)
class FairnessProperty:
    """Bias measure ``kind`` with threshold ``threshold``.

    DP and EqOpp bias is ``|w_a - w_b|``; DI bias is ``|w_a / w_b|``.
    Undefined welfare values make the bias 0.
    """

    kind: str
    threshold: float

    def __post_init__(self):
        if self.kind not in PROPERTIES:
            raise InvalidConfig(f"unknown fairness property {self.kind!r}")
        if self.threshold < 0:
            raise InvalidConfig("threshold must be nonnegative")

    @property
    def arity(self) -> int:
        return 6 if self.kind == "eqopp" else 4


def _bias(kind, na, na1, nb, nb1):
    na, na1, nb, nb1 = (np.asarray(x, dtype=float) for x in (na, na1, nb, nb1))
    with np.errstate(divide="ignore", invalid="ignore"):
        wa = na1 / na
        wb = nb1 / nb
        if kind == "di":
            val = np.abs(wa / wb)
            ok = (na > 0) & (nb > 0) & (nb1 > 0)
        else:
            val = np.abs(wa - wb)
            ok = (na > 0) & (nb > 0)
    return np.where(ok, val, 0.0)


def _check_counters(kind, counters):
    c = tuple(int(x) for x in counters)
    need = 6 if kind == "eqopp" else 4
    if len(c) != need:
        raise InvalidInput(f"{kind} needs {need} counters, got {len(c)}")
    if any(x < 0 for x in c) or c[1] > c[0] or c[3] > c[2]:
        raise InvalidInput(f"invalid counter vector {c}")
    if kind == "eqopp" and c[5] not in (0, 1):
        raise InvalidInput("pending slot must be 0 or 1")
    return c


def eval_property(prop: FairnessProperty | str, counters: Sequence[int]) -> float:
    """Bias of a counter vector."""
    kind = prop.kind if isinstance(prop, FairnessProperty) else prop
    c = _check_counters(kind, counters)
    return float(_bias(kind, c[0], c[1], c[2], c[3]))


def update_counters(kind: str, counters: Sequence[int], group: int, decision: int,
                    z: int | None = None) -> tuple[int, ...]:
    """Counters after one decision; EqOpp needs the revealed ground truth ``z``."""
    c = list(_check_counters(kind, counters))
    g = 2 * int(group)
    if kind == "eqopp":
        if z is None:
            raise InvalidInput("EqOpp counters need the ground truth of the candidate")
        if z:
            c[g] += 1
            c[g + 1] += int(decision)
        else:
            c[4] += 1
        return tuple(c)
    c[g] += 1
    c[g + 1] += int(decision)
    return tuple(c)


def zero_counters(kind: str) -> tuple[int, ...]:
    return (0,) * (6 if kind == "eqopp" else 4)


def trace_cost(recs: Sequence[int], decisions: Sequence[int], costs: Sequence[float],
               upto: int | None = None) -> float:
    """Sum of the costs of the steps (before ``upto``) where the decision differs."""
    n = len(recs)
    if not len(decisions) == len(costs) == n:
        raise InvalidInput("recommendations, decisions and costs must have equal length")
    if upto is None:
        upto = n
    if not 0 <= upto <= n:
        raise InvalidInput("upto exceeds the trace length")
    return float(sum(c for r, y, c in zip(recs[:upto], decisions[:upto], costs[:upto]) if r != y))


# --------------------------------------------------------------------------
# counter layouts

class _FlatLayout:
    """States of layer t for DP/DI: ``(n_a, n_a1, n_b1)`` with ``n_b = t - n_a``."""

    def __init__(self, t: int):
        self.t = t
        k = np.arange(t + 1)
        block = (k + 1) * (t - k + 1)
        self.offset = np.concatenate([[0], np.cumsum(block)])
        self.size = int(self.offset[-1])
        na = np.repeat(k, block)
        local = np.arange(self.size) - self.offset[na]
        width = t - na + 1
        self.na = na
        self.na1 = local // width
        self.nb1 = local % width
        self.nb = t - na

    def index(self, na, na1, nb1):
        return self.offset[na] + na1 * (self.t - na + 1) + nb1

    def counters(self, i: int) -> tuple[int, int, int, int]:
        return (int(self.na[i]), int(self.na1[i]), int(self.nb[i]), int(self.nb1[i]))


class _DenseLayout:
    """States of layer t for EqOpp: dense ``(n'_a, n'_a1, n'_b, n'_b1)`` grid."""

    def __init__(self, t: int):
        self.t = t
        self.n = t + 1
        self.size = self.n ** 4
        g = np.indices((self.n,) * 4).reshape(4, -1)
        self.na, self.na1, self.nb, self.nb1 = g

    def index(self, na, na1, nb, nb1):
        n = self.n
        return ((na * n + na1) * n + nb) * n + nb1


# --------------------------------------------------------------------------
# finite-horizon synthesis

@dataclass(frozen=True, eq=False)
class FairnessShieldTable:
    """Value tables ``values[t]`` for t = 0..T and the data to derive decisions.

    ``values[T]`` is the base case; ``values[0]`` holds the root value at
    index 0 (the empty suffix).  ``prefix`` is the counter vector of the
    history the table was conditioned on.
    """

    kind: str
    threshold: float
    horizon: int
    base: str
    prefix: tuple[int, ...]
    theta: InputDistribution
    values: tuple[np.ndarray, ...]
    bounds: tuple[float, float] | None = None

    @property
    def root_value(self) -> float:
        return float(self.values[0][0])

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.root_value)

    def _layout(self, t):
        return _DenseLayout(t) if self.kind == "eqopp" else _FlatLayout(t)

    def state_index(self, t: int, counters: Sequence[int]) -> int:
        """Index of suffix counters (relative to the prefix) in layer t."""
        c = _check_counters(self.kind, counters)
        if self.kind == "eqopp":
            if c[0] + c[2] + c[4] != t or c[5] != 0:
                raise InvalidInput(f"counters {c} do not describe {t} revealed decisions")
            return int(self._layout(t).index(c[0], c[1], c[2], c[3]))
        if c[0] + c[2] != t:
            raise InvalidInput(f"counters {c} do not describe {t} decisions")
        return int(self._layout(t).index(c[0], c[1], c[3]))

    def value(self, t: int, counters: Sequence[int]) -> float:
        return float(self.values[t][self.state_index(t, counters)])

    def _option_values(self, t, counters, group, rec, cost, p_z1):
        """Expected remaining cost of (follow, flip) at layer t."""
        nxt = self.values[t + 1]
        c = _check_counters(self.kind, counters)
        out = []
        for y in (rec, 1 - rec):
            extra = cost if y != rec else 0.0
            if self.kind == "eqopp":
                lay = self._layout(t + 1)
                na, na1, nb, nb1 = c[:4]
                if group == 0:
                    hit = nxt[lay.index(na + 1, na1 + y, nb, nb1)]
                else:
                    hit = nxt[lay.index(na, na1, nb + 1, nb1 + y)]
                miss = nxt[lay.index(na, na1, nb, nb1)]
                v = (p_z1 * hit if p_z1 > 0 else 0.0) + ((1 - p_z1) * miss if p_z1 < 1 else 0.0)
            else:
                lay = self._layout(t + 1)
                na, na1, _, nb1 = c
                if group == 0:
                    v = nxt[lay.index(na + 1, na1 + y, nb1)]
                else:
                    v = nxt[lay.index(na, na1, nb1 + y)]
            out.append(v + extra)
        return out

    def decision(self, t: int, counters: Sequence[int], group: int, rec: int, cost: float,
                 p_z1: float | None = None) -> int:
        """Optimal final decision; ties keep the recommendation."""
        if not 0 <= t < self.horizon:
            raise InvalidInput(f"time {t} outside [0, {self.horizon})")
        if self.kind == "eqopp" and p_z1 is None:
            p_z1 = self._atom_p_z1(group, rec, cost)
        follow, flip = self._option_values(t, counters, int(group), int(rec), float(cost), p_z1)
        return int(rec) if follow <= flip else 1 - int(rec)

    def _atom_p_z1(self, group, rec, cost):
        th = self.theta
        if th.p_z1 is None:
            raise InvalidConfig("EqOpp needs ground-truth probabilities")
        hits = np.flatnonzero((th.group == group) & (th.rec == rec) & np.isclose(th.cost, cost))
        if hits.size == 0:
            raise InvalidInput("atom not in the distribution; pass p_z1 explicitly")
        return float(th.p_z1[hits[0]])

    def decision_table(self, t: int) -> np.ndarray:
        """Decisions for every state of layer t (rows) and atom (columns)."""
        lay = self._layout(t)
        out = np.empty((lay.size, len(self.theta)), dtype=np.int8)
        for j in range(len(self.theta)):
            f, x = _layer_options(self, t, lay, j)
            out[:, j] = np.where(f <= x, self.theta.rec[j], 1 - self.theta.rec[j])
        return out


def _layer_options(table, t, lay, j):
    th = table.theta
    g, r, c = int(th.group[j]), int(th.rec[j]), float(th.cost[j])
    nxt = table.values[t + 1]
    nl = table._layout(t + 1)
    res = []
    for y in (r, 1 - r):
        if table.kind == "eqopp":
            q = float(th.p_z1[j])
            if g == 0:
                hit = nxt[nl.index(lay.na + 1, lay.na1 + y, lay.nb, lay.nb1)]
            else:
                hit = nxt[nl.index(lay.na, lay.na1, lay.nb + 1, lay.nb1 + y)]
            miss = nxt[nl.index(lay.na, lay.na1, lay.nb, lay.nb1)]
            v = (q * hit if q > 0 else 0.0) + ((1 - q) * miss if q < 1 else 0.0)
        else:
            if g == 0:
                v = nxt[nl.index(lay.na + 1, lay.na1 + y, lay.nb1)]
            else:
                v = nxt[nl.index(lay.na, lay.na1, lay.nb1 + y)]
        res.append(v + (c if y != r else 0.0))
    return res[0], res[1]


def _base_layer(kind, lay, threshold, base, prefix, bounds):
    """Base-case values at the horizon (0 = fine, inf = violation)."""
    p = prefix
    na = lay.na + p[0]
    na1 = lay.na1 + p[1]
    nb = lay.nb + p[2]
    nb1 = lay.nb1 + p[3]
    bias = _bias(kind, na, na1, nb, nb1)
    ok = bias <= threshold + _EPS
    if base == "bw":
        lo, hi = bounds
        n_min = balance_threshold(lo, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            wa = np.where(na > 0, na1 / np.maximum(na, 1), 0.0)
            wb = np.where(nb > 0, nb1 / np.maximum(nb, 1), 0.0)
        inside = (wa >= lo - _EPS) & (wa <= hi + _EPS) & (wb >= lo - _EPS) & (wb <= hi + _EPS)
        balanced = (na >= n_min) & (nb >= n_min)
        ok = ~balanced | inside
    elif base == "dynamic":
        prefix_bias = float(_bias(kind, p[0], p[1], p[2], p[3]))
        with np.errstate(divide="ignore"):
            slack = 1.0 / na + 1.0 / nb
        violates = ~(slack <= threshold + prefix_bias + _EPS)
        ok = ok | violates
    if kind == "eqopp":
        # states that no run can reach (accepted above appeared) never matter
        ok = ok | (lay.na1 > lay.na) | (lay.nb1 > lay.nb)
    return np.where(ok, 0.0, INF)


def _synthesize(theta: InputDistribution, kind: str, threshold: float, T: int, base: str,
                prefix: Sequence[int], bounds=None) -> FairnessShieldTable:
    if T < 1:
        raise InvalidConfig("horizon must be at least 1")
    if kind not in PROPERTIES:
        raise InvalidConfig(f"unknown fairness property {kind!r}")
    if kind == "eqopp" and theta.p_z1 is None:
        raise InvalidConfig("EqOpp needs ground-truth probabilities p_z1")
    prefix = _check_counters(kind, prefix) if prefix is not None else zero_counters(kind)
    make = _DenseLayout if kind == "eqopp" else _FlatLayout
    layouts = [make(t) for t in range(T + 1)]
    values = [None] * (T + 1)
    values[T] = _base_layer(kind, layouts[T], threshold, base, prefix, bounds)
    support = np.flatnonzero(theta.prob > 0)
    for t in range(T - 1, -1, -1):
        lay, nl, nxt = layouts[t], layouts[t + 1], values[t + 1]
        idx = {}
        if kind == "eqopp":
            idx["miss"] = nl.index(lay.na, lay.na1, lay.nb, lay.nb1)
            for y in (0, 1):
                idx[(0, y)] = nl.index(lay.na + 1, lay.na1 + y, lay.nb, lay.nb1)
                idx[(1, y)] = nl.index(lay.na, lay.na1, lay.nb + 1, lay.nb1 + y)
        else:
            for y in (0, 1):
                idx[(0, y)] = nl.index(lay.na + 1, lay.na1 + y, lay.nb1)
                idx[(1, y)] = nl.index(lay.na, lay.na1, lay.nb1 + y)
        acc = np.zeros(lay.size)
        for j in support:
            g, r, c, pr = int(theta.group[j]), int(theta.rec[j]), float(theta.cost[j]), float(theta.prob[j])
            if kind == "eqopp":
                q = float(theta.p_z1[j])
                miss = nxt[idx["miss"]]

                def opt(y):
                    hit = nxt[idx[(g, y)]]
                    return (q * hit if q > 0 else 0.0) + ((1 - q) * miss if q < 1 else 0.0)
                follow, flip = opt(r), opt(1 - r) + c
            else:
                follow, flip = nxt[idx[(g, r)]], nxt[idx[(g, 1 - r)]] + c
            acc += pr * np.minimum(follow, flip)
        values[t] = acc
    for v in values:
        v.setflags(write=False)
    return FairnessShieldTable(kind, float(threshold), T, base, tuple(prefix), theta,
                               tuple(values), bounds)


def synth_finhzn(theta: InputDistribution, prop: FairnessProperty | str, threshold: float | None = None,
                 T: int = 1, raise_infeasible: bool = False) -> FairnessShieldTable:
    """Finite-horizon shield: bias at most the threshold after T decisions, at minimal
    expected intervention cost.  An infinite root value means no such shield exists;
    pass ``raise_infeasible`` to turn that into an error."""
    kind, kappa = _prop_args(prop, threshold)
    table = _synthesize(theta, kind, kappa, T, "fair", None)
    if raise_infeasible and not table.feasible:
        raise InfeasibleSynthesis(f"no {kind} shield with threshold {kappa} over horizon {T}")
    return table


def _prop_args(prop, threshold):
    if isinstance(prop, FairnessProperty):
        return prop.kind, prop.threshold if threshold is None else float(threshold)
    if threshold is None:
        raise InvalidConfig("threshold required")
    FairnessProperty(prop, float(threshold))
    return prop, float(threshold)


def balance_threshold(lo: float, hi: float) -> int:
    """Smallest per-group count N from which welfare bounds [lo, hi] are always enforceable."""
    if not 0 <= lo < hi <= 1:
        raise InvalidConfig("need 0 <= l < u <= 1")
    return int(math.ceil(1.0 / (hi - lo) - 1e-9))


def balanced_trace_exists(T: int, N: int) -> bool:
    """Whether some length-T trace shows each group at least N times."""
    if T < 0 or N < 0:
        raise InvalidConfig("need T >= 0 and N >= 0")
    return 2 * N <= T


def synth_static_bw(theta: InputDistribution, lo: float, hi: float, T: int,
                    kind: str = "dp") -> FairnessShieldTable:
    """Shield that keeps both group welfares inside ``[lo, hi]`` on N-balanced
    traces (each group at least ``N = ceil(1/(hi-lo))`` times) and gives up on
    the others."""
    if kind == "di":
        raise InvalidConfig("welfare-bound shields need a difference-of-ratios property")
    balance_threshold(lo, hi)
    return _synthesize(theta, kind, 1.0, T, "bw", None, (float(lo), float(hi)))


def synth_static_fair(theta, prop, threshold=None, T=1):
    """Per-period shield of the Static-Fair construction (a finite-horizon shield)."""
    kind, kappa = _prop_args(prop, threshold)
    if kind == "di":
        raise InvalidConfig("periodic shields need a difference-of-ratios property")
    return synth_finhzn(theta, kind, kappa, T)


def dynamic_assumption_holds(kind: str, prefix: Sequence[int], suffix: Sequence[int],
                             threshold: float) -> bool:
    """Whether the prefix-plus-suffix denominators leave room to stay within threshold."""
    p = _check_counters(kind, prefix)
    s = _check_counters(kind, suffix)
    na, nb = p[0] + s[0], p[2] + s[2]
    if na == 0 or nb == 0:
        return False
    return 1.0 / na + 1.0 / nb <= threshold + eval_property(kind, p) + _EPS


def synth_dynamic(theta: InputDistribution, prop: FairnessProperty | str,
                  threshold: float | None = None, T: int = 1,
                  prefix: Sequence[int] | None = None) -> FairnessShieldTable:
    """Shield for the next period conditioned on the counters of the history.

    The base case asks for bias at most the threshold on history plus
    suffix.  Suffixes whose denominators violate the feasibility assumption
    cost nothing (the shield gives up on them).  With an empty history this
    is the finite-horizon shield.
    """
    kind, kappa = _prop_args(prop, threshold)
    if kind == "di":
        raise InvalidConfig("periodic shields need a difference-of-ratios property")
    prefix = zero_counters(kind) if prefix is None else _check_counters(kind, prefix)
    if not any(prefix):
        return synth_finhzn(theta, kind, kappa, T)
    return _synthesize(theta, kind, kappa, T, "dynamic", prefix)


# --------------------------------------------------------------------------
# deployment

def apply_shield(table: FairnessShieldTable, t: int, counters: Sequence[int], group: int,
                 rec: int, cost: float, z: int | None = None, p_z1: float | None = None):
    """Decision at step t for suffix counters ``counters`` and the counters after it.

    For EqOpp pass the revealed ground truth ``z`` to advance the counters;
    without it the returned counters are None.
    """
    if not math.isfinite(table.value(t, counters)):
        raise InfeasibleState(f"no fair continuation from counters {tuple(counters)} at time {t}")
    y = table.decision(t, counters, group, rec, cost, p_z1)
    if table.kind == "eqopp" and z is None:
        return y, None
    return y, update_counters(table.kind, counters, group, y, z)


def expected_cost(table: FairnessShieldTable) -> float:
    """Expected total cost of following the table from the empty suffix,
    computed forward over the reachable counters.  Equals the root value."""
    th = table.theta
    dist = {zero_counters(table.kind): 1.0}
    total = 0.0
    if not table.feasible:
        return INF
    for t in range(table.horizon):
        nxt: dict = {}
        for c, pc in dist.items():
            for j in np.flatnonzero(th.prob > 0):
                g, r, cost = th.atom(j)
                q = None if th.p_z1 is None else float(th.p_z1[j])
                y = table.decision(t, c, g, r, cost, q)
                w = pc * th.prob[j]
                if y != r:
                    total += w * cost
                if table.kind == "eqopp":
                    for z, pz in ((1, q), (0, 1 - q)):
                        if pz > 0:
                            c2 = update_counters("eqopp", c, g, y, z)
                            nxt[c2] = nxt.get(c2, 0.0) + w * pz
                else:
                    c2 = update_counters(table.kind, c, g, y)
                    nxt[c2] = nxt.get(c2, 0.0) + w
        dist = nxt
    return total


def balance_probability(T: int, p: float, N: int) -> float:
    """Probability that a Binomial(T, p) count lies in ``[N, T - N]``."""
    if not 0 <= p <= 1 or N < 0 or T < 0:
        raise InvalidConfig("need 0 <= p <= 1, N >= 0, T >= 0")
    if N > T - N:
        return 0.0
    from scipy.stats import binom
    return float(binom.cdf(T - N, T, p) - (binom.cdf(N - 1, T, p) if N > 0 else 0.0))


def keep_above_sequence(lo: float, n: int) -> int:
    """Accepted count ``ceil(lo * n)`` that keeps the welfare just above ``lo``."""
    return int(math.ceil(lo * n - 1e-12))


# --------------------------------------------------------------------------
# serialization

def save_table(table: FairnessShieldTable, path) -> None:
    """Versioned binary (numpy archive) with every value layer."""
    th = table.theta
    arrays = {f"values_{t}": v for t, v in enumerate(table.values)}
    np.savez_compressed(
        path, version=np.array(TABLE_FORMAT_VERSION), kind=np.array(table.kind),
        threshold=np.array(table.threshold), horizon=np.array(table.horizon),
        base=np.array(table.base), prefix=np.array(table.prefix),
        bounds=np.array(table.bounds if table.bounds else (np.nan, np.nan)),
        group=th.group, rec=th.rec, cost=th.cost, prob=th.prob,
        p_z1=th.p_z1 if th.p_z1 is not None else np.array([]), **arrays)


def load_table(path) -> FairnessShieldTable:
    with np.load(path, allow_pickle=False) as f:
        version = int(f["version"])
        if version != TABLE_FORMAT_VERSION:
            raise InvalidConfig(f"unsupported table version {version}")
        T = int(f["horizon"])
        z = f["p_z1"]
        theta = InputDistribution(f["group"], f["rec"], f["cost"], f["prob"],
                                  z if z.size else None)
        bounds = tuple(float(x) for x in f["bounds"])
        values = []
        for t in range(T + 1):
            v = np.array(f[f"values_{t}"])
            v.setflags(write=False)
            values.append(v)
        return FairnessShieldTable(str(f["kind"]), float(f["threshold"]), T, str(f["base"]),
                                   tuple(int(x) for x in f["prefix"]), theta, tuple(values),
                                   None if math.isnan(bounds[0]) else bounds)


def export_table_csv(table: FairnessShieldTable, path, max_rows: int | None = None) -> int:
    """CSV ``t,<counters>,value,<decision per atom>``; returns the number of rows."""
    names = (["n_a", "n_a1", "n_b", "n_b1"] if table.kind != "eqopp"
             else ["n_a", "n_a1", "n_b", "n_b1"])
    atoms = [f"d{j}" for j in range(len(table.theta))]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names, "value", *atoms])
        for t in range(table.horizon + 1):
            lay = table._layout(t)
            dec = table.decision_table(t) if t < table.horizon else None
            vals = table.values[t]
            for i in range(lay.size):
                if table.kind == "eqopp":
                    c = (lay.na[i], lay.na1[i], lay.nb[i], lay.nb1[i])
                    if c[1] > c[0] or c[3] > c[2] or c[0] + c[2] > t:
                        continue
                else:
                    c = lay.counters(i)
                v = vals[i]
                w.writerow([t, *map(int, c), "inf" if math.isinf(v) else repr(float(v)),
                            *([] if dec is None else map(int, dec[i]))])
                rows += 1
                if max_rows is not None and rows >= max_rows:
                    return rows
    return rows


# --------------------------------------------------------------------------
# periodic runs

@dataclass
class PeriodicRun:
    """Outcome of a periodic run: per-period counters, cumulative bias at each
    period end, per-period cost and the per-step log."""

    counters: list = field(default_factory=list)
    bias: list = field(default_factory=list)
    period_bias: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    assumption: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "group", "rec", "cost", "decision", "bias"])
            for row in self.steps:
                w.writerow([row[0], "ab"[row[1]], row[2], repr(float(row[3])), row[4], repr(float(row[5]))])


def _add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def run_periodic(variant: str, theta: InputDistribution, prop: FairnessProperty | str | None = None,
                 threshold: float | None = None, T: int = 1, periods: int = 1, seed: int = 0,
                 bounds: tuple[float, float] | None = None, inputs: Sequence[int] | None = None,
                 ground_truth: Sequence[int] | None = None) -> PeriodicRun:
    """Run a periodic construction for ``periods`` periods of length T.

    ``variant`` is ``static-fair`` (one finite-horizon shield, counters reset
    each period), ``static-bw`` (one welfare-bound shield, reset each period)
    or ``dynamic`` (re-synthesized each period on the cumulative counters).
    Inputs are atom indices sampled from ``theta`` unless ``inputs`` replays
    a fixed stream.
    """
    if periods < 1:
        raise InvalidConfig("need at least one period")
    if variant == "static-bw":
        if bounds is None:
            raise InvalidConfig("static-bw needs welfare bounds (l, u)")
        kind = prop.kind if isinstance(prop, FairnessProperty) else (prop or "dp")
        kappa = threshold if threshold is not None else (
            prop.threshold if isinstance(prop, FairnessProperty) else 1.0)
    else:
        kind, kappa = _prop_args(prop, threshold)
    if kind == "di":
        raise InvalidConfig("periodic shields need a difference-of-ratios property")
    if variant not in ("static-fair", "static-bw", "dynamic"):
        raise InvalidConfig(f"unknown periodic variant {variant!r}")
    rng = np.random.default_rng(seed)
    total_steps = T * periods
    if inputs is None:
        stream = theta.sample(rng, total_steps)
    else:
        stream = np.asarray(inputs, dtype=np.int64)
        if stream.size != total_steps:
            raise InvalidInput(f"replayed stream has {stream.size} inputs, need {total_steps}")
    if kind == "eqopp":
        if ground_truth is None:
            gt = (rng.random(total_steps) < theta.p_z1[stream]).astype(int)
        else:
            gt = np.asarray(ground_truth, dtype=int)
    static = None
    if variant == "static-fair":
        static = synth_finhzn(theta, kind, kappa, T)
    elif variant == "static-bw":
        static = synth_static_bw(theta, bounds[0], bounds[1], T, kind)
    run = PeriodicRun()
    cumulative = zero_counters(kind)
    for m in range(periods):
        if variant == "dynamic":
            table = synth_dynamic(theta, kind, kappa, T, cumulative)
        else:
            table = static
        local = zero_counters(kind)
        cost = 0.0
        for t in range(T):
            k = m * T + t
            j = int(stream[k])
            g, r, c = theta.atom(j)
            q = None if theta.p_z1 is None else float(theta.p_z1[j])
            if math.isfinite(table.value(t, local)):
                y = table.decision(t, local, g, r, c, q)
            else:
                y = r
            z = int(gt[k]) if kind == "eqopp" else None
            local = update_counters(kind, local, g, y, z)
            if y != r:
                cost += c
            bias_now = eval_property(kind, _add(cumulative, local))
            run.steps.append((k, g, r, c, y, bias_now))
        if variant == "dynamic" and m > 0:
            run.assumption.append(dynamic_assumption_holds(kind, cumulative, local, kappa))
        else:
            run.assumption.append(True)
        cumulative = _add(cumulative, local)
        run.counters.append(local)
        run.period_bias.append(eval_property(kind, local))
        run.bias.append(eval_property(kind, cumulative))
        run.cost.append(cost)
    return run


def replay_stream(groups_decisions: Sequence[tuple[int, int]], costs: float = 1.0,
                  ) -> tuple[InputDistribution, list[int]]:
    """Distribution and input stream that replays given (group, recommendation)
    pairs; every atom is equally likely and has the same cost."""
    atoms = [(g, r) for g in (0, 1) for r in (0, 1)]
    theta = InputDistribution([a[0] for a in atoms], [a[1] for a in atoms],
                              [costs] * 4, [0.25] * 4)
    return theta, [atoms.index((int(g), int(r))) for g, r in groups_decisions]
