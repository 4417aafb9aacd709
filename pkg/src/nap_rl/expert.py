"""Scripted expert system policy used to generate demonstrations.

The expert reads the user goal directly, the way a human wizard acts on
cues that the tracked state does not capture: it asks for exactly the
constraint the user still has in mind and offers an entity as soon as
every goal constraint is known. Learned policies only see state features,
so imitating it is not trivial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .acts import GENERAL, DialogAct, canonicalize, format_acts, parse_acts
from .env import DialogueEnv, EnvState, entity_satisfies
from .ontology import DONTCARE, UserGoal


def _focus_domain(state: EnvState, goal: UserGoal) -> Optional[str]:
    for act in state.last_user_acts:
        if act.domain != GENERAL and act.domain in goal.parts:
            return act.domain
    for d in goal.domains:
        if state.requested[d] or len(state.constraints[d]) < len(goal[d].constraints):
            return d
    return None


def expert_action(state: EnvState, goal: UserGoal) -> tuple[DialogAct, ...]:
    """Value-free system acts for the current turn."""
    d = _focus_domain(state, goal)
    if d is None:
        return ()
    wanted = goal[d].constraints
    tracked = state.constraints[d]
    missing = [s for s in wanted if s not in tracked]
    if missing:
        return (DialogAct(d, "request", ((missing[0], None),)),)
    acts = []
    real = {s: v for s, v in tracked.items() if v != DONTCARE}
    if not entity_satisfies(state.offered[d], real):
        acts.append(DialogAct(d, "offer", (("name", None),)))
    for slot in sorted(state.requested[d]):
        acts.append(DialogAct(d, "inform", ((slot, None),)))
    if not acts:
        acts.append(DialogAct(d, "inform", (("name", None),)))
    return canonicalize(acts)


@dataclass
class Session:
    """One finished dialogue: goal, per-turn acts, outcome."""

    goal: UserGoal
    turns: list[dict]
    outcome: str
    n_turns: int
    offered: dict

    def to_json(self) -> str:
        return json.dumps(
            {"goal": self.goal.to_dict(), "turns": self.turns, "outcome": self.outcome,
             "n_turns": self.n_turns, "offered": self.offered},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Session":
        data = json.loads(line)
        return cls(UserGoal.from_dict(data["goal"]), data["turns"], data["outcome"], data["n_turns"], data["offered"])

    def pairs(self) -> list[tuple[tuple[DialogAct, ...], tuple[DialogAct, ...]]]:
        """(user acts, system response) for every turn the system answered."""
        return [(parse_acts(t["user"]), parse_acts(t["system"])) for t in self.turns]


def run_expert_session(env: DialogueEnv, rng: np.random.Generator, goal: Optional[UserGoal] = None, record_features: bool = False):
    """Play one expert-vs-simulator dialogue; returns the session (and features if asked)."""
    state, _ = env.reset(rng, goal)
    features, actions = [], []
    done = False
    while not done:
        acts = expert_action(state, env.goal)
        if record_features:
            features.append(env.features(state))
            actions.append(acts)
        state, done, _ = env.step(acts)
    session = Session(env.goal, list(env.transcript), state.outcome.value, state.turn_index, dict(state.offered))
    if record_features:
        return session, features, actions
    return session


def generate_demonstrations(env: DialogueEnv, n: int, seed: int) -> list[Session]:
    """``n`` expert sessions, each with its own RNG stream spawned from ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(n)
    return [run_expert_session(env, np.random.default_rng(s)) for s in streams]


def write_sessions(sessions: Iterable[Session], path) -> None:
    with open(path, "w") as fh:
        for s in sessions:
            fh.write(s.to_json() + "\n")


def read_sessions(path) -> list[Session]:
    return [Session.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
