"""Agenda-based user simulator.

The user keeps a stack of pending acts built from its goal. Each turn it
first reacts to the system (answering requests for its constraints,
correcting contradicted values, relaxing after a ``nooffer``), then pops
a few pending acts of the domain on top of the stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .acts import GENERAL, DialogAct, canonicalize
from .errors import InvalidInputError, UsageError
from .ontology import DONTCARE, Ontology, UserGoal

MAX_POP = 2
UNKNOWN_VALUE = "unknown"


class Satisfaction(str, Enum):
    ONGOING = "ongoing"
    SATISFIED = "satisfied"
    ABANDONED = "abandoned"


@dataclass
class UserTurnOutcome:
    user_acts: tuple[DialogAct, ...]
    session_over: bool
    satisfaction: Satisfaction


@dataclass
class Agenda:
    goal: UserGoal
    ontology: Ontology
    # pending (domain, intent, slot) items; the end of the list is the top
    stack: list[tuple[str, str, str]] = field(default_factory=list)
    informed: dict[str, set] = field(default_factory=dict)
    answered: dict[str, set] = field(default_factory=dict)
    relaxed: dict[str, set] = field(default_factory=dict)
    asked_last_turn: list[tuple[str, str]] = field(default_factory=list)
    failed: set = field(default_factory=set)
    satisfaction: Satisfaction = Satisfaction.ONGOING
    over: bool = False

    def active_constraints(self, domain: str) -> dict[str, str]:
        cons = self.goal[domain].constraints
        return {s: v for s, v in cons.items() if s not in self.relaxed[domain]}

    def domain_done(self, domain: str) -> bool:
        if domain in self.failed:
            return True
        part = self.goal[domain]
        informed = self.informed[domain] | self.relaxed[domain]
        return set(part.constraints) <= informed and set(part.requests) <= self.answered[domain]


def _inform(domain: str, slot: str, value: str) -> DialogAct:
    return DialogAct(domain, "inform", ((slot, value),))


def _request(domain: str, slot: str) -> DialogAct:
    return DialogAct(domain, "request", ((slot, None),))


def init_session(goal: UserGoal, ontology: Ontology, rng: np.random.Generator) -> tuple[Agenda, tuple[DialogAct, ...]]:
    """Build the agenda for ``goal`` and produce the user's opening acts."""
    if not goal.domains:
        raise InvalidInputError("goal involves no domains")
    sequence: list[tuple[str, str, str]] = []
    for d in goal.domains:
        part = goal[d]
        if not part.constraints:
            raise InvalidInputError(f"goal for {d!r} has no constraints")
        if not part.requests:
            raise InvalidInputError(f"goal for {d!r} has no requests")
        slots = list(part.constraints)
        order = rng.permutation(len(slots))
        sequence.extend((d, "inform", slots[i]) for i in order)
        sequence.extend((d, "request", s) for s in part.requests)
    agenda = Agenda(
        goal=goal,
        ontology=ontology,
        stack=list(reversed(sequence)),
        informed={d: set() for d in goal.domains},
        answered={d: set() for d in goal.domains},
        relaxed={d: set() for d in goal.domains},
    )
    n = int(rng.integers(1, MAX_POP + 1))
    acts = _pop(agenda, n, informs_only=True)
    return agenda, canonicalize(acts)


def _pop(agenda: Agenda, budget: int, informs_only: bool = False) -> list[DialogAct]:
    out: list[DialogAct] = []
    domain = None
    while agenda.stack and len(out) < budget:
        d, intent, slot = agenda.stack[-1]
        if domain is not None and d != domain:
            break
        if informs_only and intent == "request":
            break
        agenda.stack.pop()
        if d in agenda.failed:
            continue
        if intent == "correct":
            if slot in agenda.relaxed[d]:
                continue
            agenda.informed[d].add(slot)
            out.append(_inform(d, slot, agenda.goal[d].constraints[slot]))
        elif intent == "inform":
            if slot in agenda.informed[d] or slot in agenda.relaxed[d]:
                continue
            agenda.informed[d].add(slot)
            out.append(_inform(d, slot, agenda.goal[d].constraints[slot]))
        else:
            if slot in agenda.answered[d]:
                continue
            agenda.asked_last_turn.append((d, slot))
            out.append(_request(d, slot))
        domain = d
    return out


def user_step(agenda: Agenda, system_acts, rng: np.random.Generator) -> UserTurnOutcome:
    if agenda.over:
        raise UsageError("user session is already over")
    goal = agenda.goal
    reactive: list[DialogAct] = []
    pushes: list[tuple[str, str, str]] = []

    for act in system_acts:
        d = act.domain
        if d == GENERAL or d not in goal.parts:
            continue
        part = goal[d]
        if act.intent == "inform":
            for slot, value in act.slot_values:
                if value is None or value == UNKNOWN_VALUE:
                    continue
                # an informed request counts even in a domain the user gave up on
                if slot in part.requests:
                    agenda.answered[d].add(slot)
                if d in agenda.failed:
                    continue
                active = agenda.active_constraints(d)
                if slot in active and value != active[slot]:
                    pushes.append((d, "correct", slot))
        elif d in agenda.failed:
            continue
        elif act.intent == "request":
            for slot, _ in act.slot_values:
                active = agenda.active_constraints(d)
                if slot in active:
                    reactive.append(_inform(d, slot, active[slot]))
                    agenda.informed[d].add(slot)
                elif slot in agenda.ontology.domain(d).informable and slot not in part.constraints:
                    reactive.append(_inform(d, slot, DONTCARE))
        elif act.intent == "nooffer":
            remaining = sorted(agenda.active_constraints(d))
            if len(remaining) > 1:
                dropped = remaining[int(rng.integers(len(remaining)))]
                agenda.relaxed[d].add(dropped)
            else:
                agenda.failed.add(d)

    # unanswered requests from last turn are asked again
    for d, slot in reversed(agenda.asked_last_turn):
        if slot not in agenda.answered[d] and d not in agenda.failed:
            agenda.stack.append((d, "request", slot))
    agenda.asked_last_turn = []
    agenda.stack.extend(pushes)

    if all(agenda.domain_done(d) for d in goal.domains):
        agenda.over = True
        agenda.satisfaction = Satisfaction.ABANDONED if agenda.failed else Satisfaction.SATISFIED
        return UserTurnOutcome((DialogAct(GENERAL, "bye"),), True, agenda.satisfaction)

    budget = int(rng.integers(1, MAX_POP + 1))
    popped = _pop(agenda, max(budget - len(reactive), 0))
    acts = canonicalize(reactive + popped)
    if not acts and not agenda.stack:
        # nothing left to say but the goal is unmet: the user gives up
        agenda.over = True
        agenda.satisfaction = Satisfaction.ABANDONED
        return UserTurnOutcome((DialogAct(GENERAL, "bye"),), True, agenda.satisfaction)
    return UserTurnOutcome(acts, False, Satisfaction.ONGOING)


def goal_progress(agenda: Agenda) -> tuple[float, float]:
    """(fraction of constraints informed or relaxed, fraction of requests answered)."""
    n_cons = n_inf = n_req = n_ans = 0
    for d in agenda.goal.domains:
        part = agenda.goal[d]
        n_cons += len(part.constraints)
        n_inf += len(set(part.constraints) & (agenda.informed[d] | agenda.relaxed[d]))
        n_req += len(part.requests)
        n_ans += len(set(part.requests) & agenda.answered[d])
    return (n_inf / n_cons if n_cons else 1.0, n_ans / n_req if n_req else 1.0)
