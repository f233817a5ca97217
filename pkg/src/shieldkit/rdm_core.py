"""Traces, pre/post shield interfaces, interference detection and induced shields.

A shield is a pure function of an opaque history summary and the current
observation.  Each formalism picks its own summary: a full trace prefix, a
counter vector or an action register.  Pre-shields return the set of allowed
actions; post-shields map a proposed action to the action that is executed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Hashable, Iterable, Sequence

import numpy as np

from .errors import InfeasibleState, InvalidInput, InvalidPolicy


@dataclass(frozen=True)
class ObsActTrace:
    """Finite observation-action trace over declared alphabets."""

    steps: tuple[tuple[int, int], ...]
    n_observations: int
    n_actions: int

    def __post_init__(self):
        steps = tuple((int(o), int(a)) for o, a in self.steps)
        object.__setattr__(self, "steps", steps)
        for i, (o, a) in enumerate(steps):
            if not 0 <= o < self.n_observations:
                raise InvalidInput(f"observation id {o} at step {i} outside alphabet")
            if not 0 <= a < self.n_actions:
                raise InvalidInput(f"action id {a} at step {i} outside alphabet")

    def __len__(self):
        return len(self.steps)

    def prefix(self, n: int) -> tuple[tuple[int, int], ...]:
        return self.steps[:n]


@dataclass(frozen=True)
class ShieldDecision:
    """Outcome of one shield query."""

    kind: str
    allowed: frozenset[int] = frozenset()
    replacement: int | None = None
    infeasible: bool = False

    def __post_init__(self):
        if self.kind not in ("pre", "post"):
            raise InvalidInput(f"unknown decision kind {self.kind!r}")
        if self.kind == "pre" and not self.allowed and not self.infeasible:
            raise InvalidInput("pre decision with empty allowed set must be marked infeasible")
        if self.kind == "post" and self.replacement is None:
            raise InvalidInput("post decision needs a replacement action")


@dataclass(frozen=True)
class InterferenceRecord:
    position: int
    observation: int
    action: int


@dataclass(frozen=True)
class PreShield:
    """Pre-shield: ``allowed(history, observation)`` returns a set of action ids."""

    allowed_fn: Callable[[Any, Any], Iterable[int]]
    n_actions: int

    kind = "pre"

    def allowed(self, history, observation) -> frozenset[int]:
        return frozenset(int(a) for a in self.allowed_fn(history, observation))

    def decide(self, history, observation) -> ShieldDecision:
        allowed = self.allowed(history, observation)
        return ShieldDecision("pre", allowed=allowed, infeasible=not allowed)


@dataclass(frozen=True)
class PostShield:
    """Post-shield: ``correct(history, observation, action)`` returns the executed action."""

    correct_fn: Callable[[Any, Any, int], int]
    n_actions: int

    kind = "post"

    def correct(self, history, observation, action: int) -> int:
        out = int(self.correct_fn(history, observation, int(action)))
        if not 0 <= out < self.n_actions:
            raise InvalidInput(f"post-shield produced action {out} outside alphabet")
        return out

    def decide(self, history, observation, action: int) -> ShieldDecision:
        return ShieldDecision("post", replacement=self.correct(history, observation, action))


def detect_interference(shield, trace: ObsActTrace, proposals: Sequence[int],
                        history_of: Callable[[ObsActTrace, int], Any] | None = None
                        ) -> list[InterferenceRecord]:
    """Positions where the shield blocks (pre) or rewrites (post) the proposal.

    ``history_of(trace, i)`` builds the history summary handed to the shield
    at step ``i``; by default it is the trace prefix of length ``i``.
    """
    if len(proposals) != len(trace):
        raise InvalidInput(
            f"{len(proposals)} proposals for a trace of length {len(trace)}")
    if history_of is None:
        history_of = ObsActTrace.prefix
    out = []
    for i, ((obs, _), prop) in enumerate(zip(trace.steps, proposals)):
        hist = history_of(trace, i)
        if shield.kind == "pre":
            hit = int(prop) not in shield.allowed(hist, obs)
        else:
            hit = shield.correct(hist, obs, prop) != int(prop)
        if hit:
            out.append(InterferenceRecord(i, obs, int(prop)))
    return out


def transparent_shield(alphabet_size: int, kind: str = "pre"):
    """Shield that never interferes: full allowed set, or the identity map."""
    if alphabet_size < 1:
        raise InvalidInput("alphabet size must be at least 1")
    full = frozenset(range(alphabet_size))
    if kind == "pre":
        return PreShield(lambda h, o: full, alphabet_size)
    if kind == "post":
        return PostShield(lambda h, o, a: a, alphabet_size)
    raise InvalidInput(f"unknown shield kind {kind!r}")


def _support(dist, n_actions: int) -> frozenset[int]:
    if isinstance(dist, dict):
        items = dist.items()
    else:
        arr = np.asarray(dist, dtype=float)
        if arr.ndim == 0:
            return frozenset([int(arr)])
        items = enumerate(arr)
    sup = frozenset(int(a) for a, p in items if p > 0)
    if any(not 0 <= a < n_actions for a in sup):
        raise InvalidPolicy("policy support contains an action outside the alphabet")
    return sup


def induced_shields(agent_policy: Callable[[Any, Any], Any], n_actions: int,
                    determinize: Callable[[Any, Any, frozenset], int] | None = None
                    ) -> tuple[PreShield, PostShield]:
    """Pre- and post-shields induced by an agent.

    ``agent_policy(history, observation)`` returns an action distribution as
    a dict, a probability vector, or a single action id.  The pre-shield
    allows exactly its support.  The post-shield keeps in-support actions and
    replaces the rest by ``determinize(history, observation, support)``,
    which defaults to the lowest action id in the support.
    """

    def support(h, o):
        sup = _support(agent_policy(h, o), n_actions)
        if not sup:
            raise InvalidPolicy(f"empty policy support at observation {o!r}")
        return sup

    if determinize is None:
        def determinize(h, o, sup):
            return min(sup)

    def correct(h, o, a):
        sup = support(h, o)
        return a if a in sup else determinize(h, o, sup)

    return PreShield(support, n_actions), PostShield(correct, n_actions)


def decisions_equal(first, second, inputs: Iterable[tuple]) -> bool:
    """Compare two shields of the same kind on an enumerated set of inputs.

    Each input is ``(history, observation)`` for pre-shields and
    ``(history, observation, action)`` for post-shields.
    """
    if first.kind != second.kind:
        raise InvalidInput("cannot compare a pre-shield with a post-shield")
    for args in inputs:
        if first.kind == "pre":
            if first.allowed(*args) != second.allowed(*args):
                return False
        elif first.correct(*args) != second.correct(*args):
            return False
    return True


def table_pre_shield(table: dict[Hashable, Iterable[int]], n_actions: int,
                     key: Callable[[Any, Any], Hashable] = lambda h, o: (h, o)) -> PreShield:
    """Pre-shield backed by a lookup table; unknown or empty keys are infeasible."""

    frozen = {k: frozenset(v) for k, v in table.items()}

    def allowed(h, o):
        got = frozen.get(key(h, o), frozenset())
        if not got:
            raise InfeasibleState(f"no allowed action at {key(h, o)!r}")
        return got

    return PreShield(allowed, n_actions)
