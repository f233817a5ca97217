"""Agency, intention quotients and counterfactual evidence for MDP policies.

For a goal formula I over atomic propositions, the agency of a state is the
gap between the best and worst reach probability of the goal states, and the
intention quotient places the analysed policy inside that gap (0 = worst,
1 = best).  Traces aggregate these values; when the evidence is too weak the
retrospective loop adds counterfactual traces obtained by varying the
peripheral variables of a factored model.
"""

from __future__ import annotations

import csv
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidInput, InvalidPolicy, UndefinedQuotient
from .mdp_engine import Mdp, Policy, ReachQuery, avoid_prob, reach_prob, state_mask

AGENCY_EPS = 1e-12


# --------------------------------------------------------------------------
# labeled MDPs and formulas

@dataclass(frozen=True, eq=False)
class LabeledMdp:
    """MDP with a valuation of atomic propositions and an optional restriction
    of the policy class as a boolean ``(n_states, n_actions)`` mask."""

    base: Mdp
    valuation: Mapping[str, np.ndarray]
    restriction: np.ndarray | None = None

    def __post_init__(self):
        vals = {}
        for name, states in self.valuation.items():
            if not re.fullmatch(r"[A-Za-z_][\w.]*", name) or name in ("true", "false"):
                raise InvalidConfig(f"bad proposition name {name!r}")
            vals[name] = state_mask(self.base, states)
            vals[name].setflags(write=False)
        object.__setattr__(self, "valuation", vals)
        if self.restriction is not None:
            r = np.asarray(self.restriction, dtype=bool)
            if r.shape != (self.base.n_states, self.base.n_actions):
                raise InvalidConfig("restriction mask has the wrong shape")
            if np.any(r & ~self.base.enabled):
                raise InvalidConfig("restriction allows a disabled action")
            if not r.any(axis=1).all():
                raise InvalidConfig("restriction leaves a state without actions")
            r.setflags(write=False)
            object.__setattr__(self, "restriction", r)

    @classmethod
    def from_mdp(cls, m: Mdp, restriction=None, extra: Mapping | None = None) -> "LabeledMdp":
        val = {k: np.array(sorted(v), dtype=np.int64) for k, v in m.labels.items()}
        val.update(extra or {})
        return cls(m, val, restriction)

    @property
    def propositions(self) -> tuple[str, ...]:
        return tuple(self.valuation)

    def states(self, formula: str) -> np.ndarray:
        """Boolean mask of the states satisfying ``formula``."""
        return eval_formula(formula, self.valuation, self.base.n_states)


_TOKEN = re.compile(r"\s*(?:(\()|(\))|(&&?|\band\b)|(\|\|?|\bor\b)|(!|~|\bnot\b)|([A-Za-z_][\w.]*))")


def _tokens(text: str):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise InvalidConfig(f"cannot parse formula near {text[pos:]!r}")
        kinds = ("(", ")", "&", "|", "!", "id")
        for kind, grp in zip(kinds, m.groups()):
            if grp is not None:
                out.append((kind, grp))
                break
        pos = m.end()
    return out


def eval_formula(formula: str, valuation: Mapping[str, np.ndarray], n_states: int) -> np.ndarray:
    """Evaluate a boolean formula (``&``, ``|``, ``!``, parentheses, ``true``,
    ``false``) over proposition masks."""
    toks = _tokens(formula)
    if not toks:
        raise InvalidConfig("empty formula")
    pos = 0

    def peek():
        return toks[pos][0] if pos < len(toks) else None

    def take(kind):
        nonlocal pos
        if peek() != kind:
            raise InvalidConfig(f"malformed formula {formula!r}")
        pos += 1
        return toks[pos - 1][1]

    def atom():
        k = peek()
        if k == "!":
            take("!")
            return ~atom()
        if k == "(":
            take("(")
            v = disj()
            take(")")
            return v
        name = take("id")
        if name == "true":
            return np.ones(n_states, dtype=bool)
        if name == "false":
            return np.zeros(n_states, dtype=bool)
        if name not in valuation:
            raise InvalidConfig(f"unknown proposition {name!r}")
        return np.asarray(valuation[name], dtype=bool).copy()

    def conj():
        v = atom()
        while peek() == "&":
            take("&")
            v = v & atom()
        return v

    def disj():
        v = conj()
        while peek() == "|":
            take("|")
            v = v | conj()
        return v

    out = disj()
    if pos != len(toks):
        raise InvalidConfig(f"trailing tokens in formula {formula!r}")
    return out


# --------------------------------------------------------------------------
# per-state quantities

@dataclass(frozen=True, eq=False)
class ReachProfile:
    """Maximal, minimal and policy reach probabilities of a goal for every state."""

    p_max: np.ndarray
    p_min: np.ndarray
    p_pol: np.ndarray | None = None

    @property
    def agency(self) -> np.ndarray:
        return np.clip(self.p_max - self.p_min, 0.0, 1.0)

    def quotient(self, s: int) -> float:
        sigma = self.p_max[s] - self.p_min[s]
        if sigma <= AGENCY_EPS:
            raise UndefinedQuotient(f"agency is zero at state {s}")
        if self.p_pol is None:
            raise InvalidConfig("profile computed without a policy")
        return float((self.p_pol[s] - self.p_min[s]) / sigma)


def _check_policy(m: LabeledMdp, policy: Policy | None):
    if policy is None:
        return
    policy.check(m.base)
    if not policy.is_deterministic:
        raise InvalidPolicy("only memoryless deterministic policies are supported")
    if m.restriction is not None and np.any((policy.probs > 0) & ~m.restriction):
        s = int(np.argwhere((policy.probs > 0) & ~m.restriction)[0][0])
        raise InvalidPolicy(f"policy leaves the restricted policy class at state {s}")


def reach_profile(m: LabeledMdp, formula: str, policy: Policy | None = None) -> ReachProfile:
    """Unbounded reach probabilities of the goal states under the restriction."""
    _check_policy(m, policy)
    goal = m.states(formula)
    p_max = reach_prob(m.base, ReachQuery(goal, None, "max", restriction=m.restriction))
    p_min = reach_prob(m.base, ReachQuery(goal, None, "min", restriction=m.restriction))
    p_pol = None
    if policy is not None:
        p_pol = reach_prob(m.base, ReachQuery(goal, None, "policy", policy=policy))
    return ReachProfile(p_max, p_min, p_pol)


def agency(m: LabeledMdp, s: int, formula: str) -> float:
    prof = reach_profile(m, formula)
    return float(prof.agency[s])


def intention_quotient(m: LabeledMdp, policy: Policy, s: int, formula: str) -> float:
    """Normalized position of the policy's reach probability; raises
    :class:`UndefinedQuotient` when the agency is zero."""
    return reach_profile(m, formula, policy).quotient(s)


def avoidance_duals(m: LabeledMdp, policy: Policy, s: int, formula: str) -> tuple[float, float]:
    """Agency and intention quotient of avoiding the goal, computed from
    avoidance probabilities (so the duality with reaching can be checked)."""
    _check_policy(m, policy)
    goal = m.states(formula)
    a_max = avoid_prob(m.base, ReachQuery(goal, None, "max", restriction=m.restriction))[s]
    a_min = avoid_prob(m.base, ReachQuery(goal, None, "min", restriction=m.restriction))[s]
    a_pol = avoid_prob(m.base, ReachQuery(goal, None, "policy", policy=policy))[s]
    sigma = a_max - a_min
    if sigma <= AGENCY_EPS:
        raise UndefinedQuotient(f"avoidance agency is zero at state {s}")
    return float(sigma), float((a_pol - a_min) / sigma)


def aggregate_values(sigmas: Sequence[float], rhos: Sequence[float | None]) -> tuple[float, float | None]:
    """Mean agency and agency-weighted intention quotient.

    Entries with zero agency get weight zero (their quotient may be None).
    The quotient is None when every agency is zero.
    """
    sig = np.asarray(sigmas, dtype=float)
    if sig.size == 0:
        raise InvalidInput("cannot aggregate an empty set")
    weight = np.where(sig > AGENCY_EPS, sig, 0.0)
    if weight.sum() <= 0:
        return float(sig.mean()), None
    rho = np.array([0.0 if r is None else r for r in rhos], dtype=float)
    return float(sig.mean()), float((weight * rho).sum() / weight.sum())


def _state_pairs(prof: ReachProfile, states):
    sig, rho = [], []
    for s in states:
        sg = float(prof.agency[s])
        sig.append(sg)
        rho.append(prof.quotient(s) if sg > AGENCY_EPS else None)
    return sig, rho


def aggregate(m: LabeledMdp, policy: Policy, states: Sequence[int], formula: str
              ) -> tuple[float, float | None]:
    """Agency and intention quotient of a set (or trace) of states."""
    if len(states) == 0:
        raise InvalidInput("cannot aggregate an empty set")
    prof = reach_profile(m, formula, policy)
    return aggregate_values(*_state_pairs(prof, states))


# --------------------------------------------------------------------------
# verdicts and commitment

@dataclass(frozen=True)
class EvidenceThresholds:
    rho_low: float = 0.25
    rho_high: float = 0.75
    sigma: float = 0.5
    belief: float = 0.05
    commitment: float = 0.75

    def __post_init__(self):
        if not 0 <= self.rho_low < self.rho_high <= 1:
            raise InvalidConfig("need 0 <= rho_low < rho_high <= 1")
        if not 0 < self.sigma < 1:
            raise InvalidConfig("agency threshold must lie in (0, 1)")
        if not 0 < self.belief < 1 or not 0 < self.commitment < 1:
            raise InvalidConfig("commitment thresholds must lie in (0, 1)")


INTENTIONAL = "intentional"
NON_INTENTIONAL = "non-intentional"
INSUFFICIENT = "insufficient"


def verdict(sigma: float, rho: float | None, thresholds: EvidenceThresholds = EvidenceThresholds()) -> str:
    if rho is None or sigma < thresholds.sigma:
        return INSUFFICIENT
    if rho >= thresholds.rho_high:
        return INTENTIONAL
    if rho <= thresholds.rho_low:
        return NON_INTENTIONAL
    return INSUFFICIENT


def commitment_from_profile(prof: ReachProfile, trace: Sequence[int], belief: float,
                            commitment: float) -> tuple[bool, int | None]:
    last_bad = -1
    for i, s in enumerate(trace):
        guard = prof.p_max[s] > belief and prof.p_min[s] < 1 - belief
        if not guard:
            continue
        sigma = prof.p_max[s] - prof.p_min[s]
        rho = prof.quotient(s) if sigma > AGENCY_EPS else 0.0
        if rho < commitment:
            last_bad = i
    k = last_bad + 2
    if k > len(trace):
        return False, None
    return True, k


def commitment_check(m: LabeledMdp, policy: Policy, trace: Sequence[int], formula: str,
                     belief: float, commitment: float) -> tuple[bool, int | None]:
    """Whether the policy is committed along the trace, with the least witness
    index k (1-based) from which every guarded state has quotient >= commitment."""
    if len(trace) == 0:
        raise InvalidInput("empty trace")
    prof = reach_profile(m, formula, policy)
    return commitment_from_profile(prof, trace, belief, commitment)


# --------------------------------------------------------------------------
# factored scenarios and counterfactuals

@dataclass(frozen=True)
class PeripheralVar:
    """Peripheral variable with its reference value and counterfactual range.

    ``choices`` lists the admissible values of a discrete variable; otherwise
    values are drawn uniformly from ``[low, high]``.
    """

    name: str
    reference: float
    low: float
    high: float
    choices: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.choices is None and not self.low <= self.high:
            raise InvalidConfig(f"{self.name}: empty range")
        if self.choices is not None and len(self.choices) == 0:
            raise InvalidConfig(f"{self.name}: no choices")

    @classmethod
    def from_epsilon(cls, name, reference, eps):
        if eps < 0:
            raise InvalidConfig(f"{name}: epsilon must be nonnegative")
        return cls(name, reference, reference - eps, reference + eps)

    @property
    def fixed(self) -> bool:
        if self.choices is not None:
            return len(set(self.choices)) == 1
        return self.low == self.high

    def sample(self, rng: np.random.Generator) -> float:
        if self.choices is not None:
            return float(self.choices[rng.integers(len(self.choices))])
        if self.fixed:
            return float(self.low)
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class FactoredScenario:
    """Reference trace of integral values plus the peripheral variables."""

    model: str
    goal: str
    integral: tuple[str, ...]
    peripherals: tuple[PeripheralVar, ...]
    trace: tuple[tuple[int, ...], ...]
    policy: str = ""

    def __post_init__(self):
        if not self.trace:
            raise InvalidConfig("scenario needs a nonempty reference trace")
        for step in self.trace:
            if len(step) != len(self.integral):
                raise InvalidConfig("trace step does not match the integral variables")

    @property
    def reference(self) -> dict[str, float]:
        return {p.name: p.reference for p in self.peripherals}


def read_scenario(path) -> FactoredScenario:
    """Read the line-oriented scenario format documented in the README."""
    model, goal, policy, integral = "", "", "", ()
    per, trace = [], []
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split(None, 1)
            rest = rest[0] if rest else ""
            try:
                if key == "model":
                    model = rest.strip()
                elif key == "goal":
                    goal = rest.strip()
                elif key == "policy":
                    policy = rest.strip()
                elif key == "integral":
                    integral = tuple(rest.split())
                elif key == "peripheral":
                    tok = rest.split()
                    name, ref, kind, vals = tok[0], float(tok[1]), tok[2], [float(v) for v in tok[3:]]
                    if kind == "range":
                        per.append(PeripheralVar(name, ref, vals[0], vals[1]))
                    elif kind == "eps":
                        per.append(PeripheralVar.from_epsilon(name, ref, vals[0]))
                    elif kind == "choice":
                        per.append(PeripheralVar(name, ref, min(vals), max(vals), tuple(vals)))
                    elif kind == "fixed":
                        per.append(PeripheralVar(name, ref, ref, ref))
                    else:
                        raise InvalidConfig(f"unknown peripheral kind {kind!r}")
                elif key == "trace":
                    trace.append(tuple(int(v) for v in rest.split()))
                else:
                    raise InvalidConfig(f"unknown scenario key {key!r}")
            except (IndexError, ValueError) as exc:
                raise InvalidConfig(f"{path}: bad line {line!r}") from exc
    if not goal:
        raise InvalidConfig(f"{path}: missing goal")
    return FactoredScenario(model, goal, integral, tuple(per), tuple(trace), policy)


def write_scenario(sc: FactoredScenario, path) -> None:
    lines = [f"model {sc.model}", f"goal {sc.goal}"]
    if sc.policy:
        lines.append(f"policy {sc.policy}")
    lines.append("integral " + " ".join(sc.integral))
    for p in sc.peripherals:
        if p.choices is not None:
            choices = " ".join(repr(float(c)) for c in p.choices)
            lines.append(f"peripheral {p.name} {float(p.reference)!r} choice {choices}")
        else:
            lines.append(f"peripheral {p.name} {float(p.reference)!r} range "
                         f"{float(p.low)!r} {float(p.high)!r}")
    lines.extend("trace " + " ".join(str(v) for v in step) for step in sc.trace)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class ScenarioInstance:
    """A model built for one peripheral assignment: the labeled MDP, the
    analysed policy and the map from integral tuples to state ids."""

    mdp: LabeledMdp
    policy: Policy
    state_of: Callable[[tuple[int, ...]], int]


def trace_states(inst: ScenarioInstance, trace) -> list[int] | None:
    """State ids of the trace, or None when some step is outside the model."""
    out = []
    for step in trace:
        try:
            out.append(int(inst.state_of(tuple(step))))
        except (KeyError, IndexError, InvalidInput):
            return None
    return out


def trace_is_valid(m: Mdp, states: Sequence[int]) -> bool:
    """Every consecutive pair has an action with positive probability."""
    for s, t in zip(states, states[1:]):
        row = m.P[m.state_ptr[s]:m.state_ptr[s + 1]]
        if not (row[:, t].toarray() > 0).any():
            return False
    return True


def _evaluate(builder, assignment, scenario, formula):
    inst = builder(assignment)
    states = trace_states(inst, scenario.trace)
    if states is None or not trace_is_valid(inst.mdp.base, states):
        return None
    goal = inst.mdp.states(formula)
    if not goal[states[-1]]:
        return None
    prof = reach_profile(inst.mdp, formula, inst.policy)
    sig, rho = _state_pairs(prof, states)
    return aggregate_values(sig, rho)


def counterfactual_batch(builder: Callable[[dict], ScenarioInstance], scenario: FactoredScenario,
                         n: int, rng: np.random.Generator, seen: set | None = None,
                         formula: str | None = None, max_attempts: int | None = None,
                         workers: int = 1) -> list[tuple[dict, tuple[float, float | None]]]:
    """Sample up to ``n`` new valid counterfactual assignments and evaluate the
    reference trace in each rebuilt model.

    Returns ``(assignment, (sigma, rho))`` pairs.  Assignments already in
    ``seen`` (and the reference) are skipped; at most ``max_attempts``
    samples (default ``50 n``) are drawn.
    """
    if n < 1:
        raise InvalidConfig("batch size must be at least 1")
    formula = formula or scenario.goal
    seen = set() if seen is None else seen
    ref_key = tuple(sorted(scenario.reference.items()))
    seen.add(ref_key)
    if all(p.fixed for p in scenario.peripherals):
        return []
    attempts = 0
    limit = max_attempts if max_attempts is not None else 50 * n
    out = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(out) < n and attempts < limit:
            want = min(n - len(out), limit - attempts)
            cands = []
            while len(cands) < want and attempts < limit:
                attempts += 1
                a = {p.name: p.sample(rng) for p in scenario.peripherals}
                key = tuple(sorted(a.items()))
                if key in seen:
                    continue
                seen.add(key)
                cands.append(a)
            if pool is not None:
                results = list(pool.map(_evaluate, [builder] * len(cands), cands,
                                        [scenario] * len(cands), [formula] * len(cands)))
            else:
                results = [_evaluate(builder, a, scenario, formula) for a in cands]
            for a, r in zip(cands, results):
                if r is not None and len(out) < n:
                    out.append((a, r))
    finally:
        if pool is not None:
            pool.shutdown()
    return out


@dataclass
class IntentionReport:
    """Outcome of a retrospective analysis.

    ``traces`` lists ``(assignment, sigma, rho)`` per analysed trace, the
    reference first; ``history`` holds ``(n_traces, sigma, rho)`` after each
    batch.
    """

    traces: list = field(default_factory=list)
    history: list = field(default_factory=list)
    sigma: float = 0.0
    rho: float | None = None
    verdict: str = INSUFFICIENT
    counterfactuals: int = 0
    exhausted: bool = False

    def write_csv(self, path) -> None:
        names = sorted({k for a, _, _ in self.traces for k in a})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trace", *names, "sigma", "rho"])
            for i, (a, s, r) in enumerate(self.traces):
                w.writerow([i, *(repr(a.get(k)) for k in names), repr(float(s)),
                            "" if r is None else repr(float(r))])

    def summary(self) -> dict:
        return {"traces": len(self.traces), "counterfactuals": self.counterfactuals,
                "sigma": self.sigma, "rho": self.rho, "verdict": self.verdict,
                "budget_exhausted": self.exhausted}


def aggregate_traces(values: Sequence[tuple[float, float | None]]) -> tuple[float, float | None]:
    """Aggregate per-trace ``(sigma, rho)``: mean agency, agency-weighted quotient."""
    return aggregate_values([v[0] for v in values], [v[1] for v in values])


def retrospective_analysis(builder: Callable[[dict], ScenarioInstance], scenario: FactoredScenario,
                           thresholds: EvidenceThresholds = EvidenceThresholds(),
                           batch: int = 5, max_counterfactuals: int = 20, seed: int = 0,
                           formula: str | None = None, workers: int = 1,
                           stop_early: bool = True) -> IntentionReport:
    """Analyse the reference trace and, while the verdict is insufficient and
    the budget allows, add batches of counterfactual traces."""
    formula = formula or scenario.goal
    rng = np.random.default_rng(seed)
    ref = scenario.reference
    res = _evaluate(builder, ref, scenario, formula)
    if res is None:
        raise InvalidConfig("reference trace is not a valid trace ending in the goal")
    report = IntentionReport()
    report.traces.append((ref, res[0], res[1]))
    report.sigma, report.rho = res
    report.verdict = verdict(res[0], res[1], thresholds)
    report.history.append((1, report.sigma, report.rho))
    seen: set = set()
    while (report.verdict == INSUFFICIENT or not stop_early) and report.counterfactuals < max_counterfactuals:
        want = min(batch, max_counterfactuals - report.counterfactuals)
        got = counterfactual_batch(builder, scenario, want, rng, seen, formula, workers=workers)
        if not got:
            break
        for a, (s, r) in got:
            report.traces.append((a, s, r))
        report.counterfactuals += len(got)
        report.sigma, report.rho = aggregate_traces([(s, r) for _, s, r in report.traces])
        report.verdict = verdict(report.sigma, report.rho, thresholds)
        report.history.append((len(report.traces), report.sigma, report.rho))
        if len(got) < want:
            break
    report.exhausted = report.verdict == INSUFFICIENT and report.counterfactuals >= max_counterfactuals
    return report


def single_trace_report(inst: ScenarioInstance, trace, formula: str,
                        thresholds: EvidenceThresholds = EvidenceThresholds()) -> IntentionReport:
    """Report for one trace in one model (no counterfactuals)."""
    states = trace_states(inst, trace)
    if states is None:
        raise InvalidInput("trace leaves the model")
    prof = reach_profile(inst.mdp, formula, inst.policy)
    s, r = aggregate_values(*_state_pairs(prof, states))
    rep = IntentionReport(traces=[({}, s, r)], history=[(1, s, r)], sigma=s, rho=r,
                          verdict=verdict(s, r, thresholds))
    return rep

