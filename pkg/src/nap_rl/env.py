"""Dialogue environment: state tracking, turn alternation, and the global reward."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

import numpy as np

from .acts import GENERAL, ActVocabulary, DialogAct, canonicalize, encode_single, format_acts, parse_acts
from .errors import UsageError
from .ontology import DONTCARE, EntityDb, Ontology, UserGoal, act_vocabulary, query_entities, sample_goal
from .usersim import UNKNOWN_VALUE, Agenda, goal_progress, init_session, user_step

MAX_TURNS = 20
SUCCESS_REWARD = 40.0
FAILURE_REWARD = -40.0
TURN_PENALTY = -1.0
DB_BUCKETS = 4


class Outcome(str, Enum):
    ONGOING = "ongoing"
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass
class EnvState:
    turn_index: int
    last_user_acts: tuple[DialogAct, ...]
    last_system_acts: tuple[DialogAct, ...]
    constraints: dict[str, dict[str, str]]
    requested: dict[str, set]
    db_match_count: dict[str, int]
    offered: dict[str, Optional[dict]]
    active_domains: tuple[str, ...] = ()
    terminal: bool = False
    outcome: Outcome = Outcome.ONGOING


@dataclass
class Transition:
    state_features: np.ndarray
    user_acts: tuple[DialogAct, ...]
    system_acts: tuple[DialogAct, ...]
    reward: float
    next_state_features: np.ndarray
    done: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "state_features": self.state_features.tolist(),
                "user_acts": format_acts(self.user_acts),
                "system_acts": format_acts(self.system_acts),
                "reward": self.reward,
                "next_state_features": self.next_state_features.tolist(),
                "done": self.done,
            }
        )


def global_reward(state: EnvState) -> float:
    """-1 per ongoing turn, +40/-40 when the session closed in success/failure."""
    if not state.terminal:
        return TURN_PENALTY
    return SUCCESS_REWARD if state.outcome == Outcome.SUCCESS else FAILURE_REWARD


def db_bucket(count: int) -> int:
    if count <= 0:
        return 0
    if count == 1:
        return 1
    if count <= 5:
        return 2
    return 3


def _real_constraints(tracked: dict[str, str]) -> dict[str, str]:
    return {s: v for s, v in tracked.items() if v != DONTCARE}


def entity_satisfies(entity: Optional[dict], constraints: dict[str, str]) -> bool:
    return entity is not None and all(entity.get(s) == v for s, v in constraints.items())


def session_match(goal: UserGoal, offered: dict[str, Optional[dict]], db: EntityDb) -> bool:
    """Every goal domain backed by entities has an offered entity meeting all goal constraints.

    Domains without any entities are matched vacuously.
    """
    for d in goal.domains:
        if not db[d]:
            continue
        if not entity_satisfies(offered.get(d), goal[d].constraints):
            return False
    return True


def state_size(ontology: Ontology, vocab: ActVocabulary) -> int:
    per_domain = sum(len(d.informable) + len(d.requestable) + DB_BUCKETS + 2 for d in ontology.domains)
    return 2 * len(vocab) + per_domain + 1


def encode_state(state: EnvState, ontology: Ontology, vocab: ActVocabulary, max_turns: int = MAX_TURNS) -> np.ndarray:
    """Fixed-length feature vector with entries in [0, 1].

    Layout: last user acts, last system acts (multi-hot each), then per
    domain: constraint-filled flags, request-outstanding flags, one-hot DB
    match bucket, entity-offered flag, offered-entity-stale flag; finally
    the turn index over ``max_turns``.
    """
    if state.terminal:
        raise UsageError("terminal states are not encoded")
    parts = [encode_single(state.last_user_acts, vocab), encode_single(state.last_system_acts, vocab)]
    for schema in ontology.domains:
        d = schema.name
        tracked = state.constraints[d]
        parts.append(np.array([1.0 if s in tracked else 0.0 for s in schema.informable]))
        parts.append(np.array([1.0 if s in state.requested[d] else 0.0 for s in schema.requestable]))
        bucket = np.zeros(DB_BUCKETS)
        bucket[db_bucket(state.db_match_count[d])] = 1.0
        parts.append(bucket)
        offered = state.offered[d]
        stale = offered is not None and not entity_satisfies(offered, _real_constraints(tracked))
        parts.append(np.array([1.0 if offered is not None else 0.0, 1.0 if stale else 0.0]))
    parts.append(np.array([state.turn_index / max_turns]))
    return np.concatenate(parts)


def _successor(prev: EnvState) -> EnvState:
    return EnvState(
        turn_index=prev.turn_index,
        last_user_acts=prev.last_user_acts,
        last_system_acts=(),
        constraints={d: dict(c) for d, c in prev.constraints.items()},
        requested={d: set(r) for d, r in prev.requested.items()},
        db_match_count=dict(prev.db_match_count),
        offered=dict(prev.offered),
        active_domains=prev.active_domains,
    )


@dataclass
class DialogueEnv:
    """One simulated session at a time against the agenda-based user."""

    ontology: Ontology
    db: EntityDb
    vocab: Optional[ActVocabulary] = None
    max_turns: int = MAX_TURNS
    goal_domains: Optional[tuple[str, ...]] = None
    goal: Optional[UserGoal] = None
    agenda: Optional[Agenda] = None
    state: Optional[EnvState] = None
    transcript: list[dict] = field(default_factory=list)
    closing_acts: tuple = ()
    _rng: Any = None

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = act_vocabulary(self.ontology)

    @property
    def feature_size(self) -> int:
        return state_size(self.ontology, self.vocab)

    def reset(self, rng: np.random.Generator, goal: Optional[UserGoal] = None):
        """Start a session; the goal is drawn from ``rng`` unless given."""
        self._rng = rng
        self.goal = goal if goal is not None else sample_goal(rng, self.ontology, self.db, self.goal_domains)
        self.agenda, first = init_session(self.goal, self.ontology, rng)
        self.state = self._fresh_state(first)
        self.transcript = []
        self.closing_acts = ()
        return self.state, first

    def features(self, state: Optional[EnvState] = None) -> np.ndarray:
        return encode_state(state or self.state, self.ontology, self.vocab, self.max_turns)

    def lexicalize(self, state: EnvState, system_acts: Sequence[DialogAct]) -> tuple[DialogAct, ...]:
        """Fill slot values from the DB; offers bind the first entity matching tracked constraints."""
        acts = canonicalize(system_acts)
        out = []
        for act in sorted(acts, key=lambda a: a.intent != "offer"):
            d = act.domain
            if d == GENERAL:
                out.append(act)
                continue
            if act.intent == "offer":
                matches = query_entities(self.ontology, self.db, d, _real_constraints(state.constraints[d]))
                state.offered[d] = dict(matches[0]) if matches else None
                name = matches[0]["name"] if matches else UNKNOWN_VALUE
                out.append(DialogAct(d, "offer", (("name", name),)))
            elif act.intent == "inform":
                pairs = []
                entity = state.offered[d]
                for slot, _ in act.slot_values:
                    if entity is not None and slot in entity:
                        value = entity[slot]
                    elif slot in state.constraints[d] and state.constraints[d][slot] != DONTCARE:
                        value = state.constraints[d][slot]
                    else:
                        value = UNKNOWN_VALUE
                    pairs.append((slot, value))
                out.append(DialogAct(d, "inform", tuple(pairs)))
            else:
                out.append(act)
        return canonicalize(out)

    def _fresh_state(self, first_user_acts) -> EnvState:
        names = self.ontology.domain_names
        state = EnvState(
            turn_index=0,
            last_user_acts=first_user_acts,
            last_system_acts=(),
            constraints={d: {} for d in names},
            requested={d: set() for d in names},
            db_match_count={d: 0 for d in names},
            offered={d: None for d in names},
        )
        self._track_user(state, first_user_acts)
        return state

    def _track_system(self, state: EnvState, sys_acts) -> None:
        state.last_system_acts = tuple(sys_acts)
        for act in sys_acts:
            d = act.domain
            if d == GENERAL:
                continue
            if act.intent == "offer":
                name = dict(act.slot_values).get("name")
                state.offered[d] = next((dict(e) for e in self.db[d] if e.get("name") == name), None)
            elif act.intent == "inform":
                for slot, value in act.slot_values:
                    if value is not None and value != UNKNOWN_VALUE:
                        state.requested[d].discard(slot)

    def replay_states(self, turns: Sequence[dict]) -> list[EnvState]:
        """Tracker states before each system response, rebuilt from a transcript alone."""
        if not turns:
            return []
        state = self._fresh_state(parse_acts(turns[0]["user"]))
        states = []
        for i, turn in enumerate(turns):
            states.append(state)
            if i + 1 == len(turns):
                break
            nxt = _successor(state)
            self._track_system(nxt, parse_acts(turn["system"]))
            nxt.turn_index += 1
            user_acts = parse_acts(turns[i + 1]["user"])
            nxt.last_user_acts = user_acts
            self._track_user(nxt, user_acts)
            state = nxt
        return states

    def _track_user(self, state: EnvState, user_acts) -> None:
        active = list(state.active_domains)
        for act in user_acts:
            d = act.domain
            if d == GENERAL:
                continue
            if d not in active:
                active.append(d)
            if act.intent == "inform":
                for slot, value in act.slot_values:
                    state.constraints[d][slot] = value
            elif act.intent == "request":
                for slot in act.slots:
                    state.requested[d].add(slot)
        state.active_domains = tuple(active)
        for d in state.active_domains:
            state.db_match_count[d] = len(
                query_entities(self.ontology, self.db, d, _real_constraints(state.constraints[d]))
            )

    def step(self, system_acts: Sequence[DialogAct]):
        """Apply the system's acts, let the user respond, and close the session if it ended.

        Returns ``(next_state, done, info)``; ``info`` carries the lexicalized
        system acts, the user's satisfaction, and goal progress.
        """
        prev = self.state
        if prev is None:
            raise UsageError("reset() must be called before step()")
        if prev.terminal:
            raise UsageError("session already terminal")
        state = _successor(prev)
        sys_acts = self.lexicalize(state, system_acts)
        self._track_system(state, sys_acts)

        outcome = user_step(self.agenda, sys_acts, self._rng)
        state.turn_index += 1
        state.last_user_acts = outcome.user_acts
        self._track_user(state, outcome.user_acts)
        self.transcript.append({"user": format_acts(prev.last_user_acts), "system": format_acts(sys_acts)})

        if outcome.session_over:
            state.terminal = True
            # user-closed sessions are judged by inform recall and match alone
            state.outcome = Outcome.SUCCESS if self.session_success(state) else Outcome.FAILURE
        elif state.turn_index >= self.max_turns:
            state.terminal = True
            state.outcome = Outcome.FAILURE
        if state.terminal:
            self.closing_acts = outcome.user_acts
        self.state = state
        info = {
            "system_acts": sys_acts,
            "satisfaction": outcome.satisfaction,
            "progress": goal_progress(self.agenda),
        }
        return state, state.terminal, info

    def inform_recall(self) -> float:
        return goal_progress(self.agenda)[1]

    def session_success(self, state: Optional[EnvState] = None) -> bool:
        state = state or self.state
        return self.inform_recall() == 1.0 and session_match(self.goal, state.offered, self.db)
