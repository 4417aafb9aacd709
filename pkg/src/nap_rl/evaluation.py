"""Session-level metrics: turns, act precision/recall/F1, match and success rates.

Act metrics compare each session's system acts with those of the scripted
expert replayed on the same goal, micro-averaged over (domain, intent, slot)
items. A session succeeds when the user closes it, every requested slot was
informed, and every offered entity meets the goal constraints.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .acts import GENERAL, DialogAct, format_acts, parse_acts
from .env import DialogueEnv, EnvState, Outcome, session_match
from .errors import InvalidInputError
from .expert import expert_action
from .ontology import EntityDb, UserGoal
from .policy import ActionSpace, PolicyModel
from .usersim import UNKNOWN_VALUE

AVERAGING = "micro"
TABLE_COLUMNS = (
    "avg_turns_success", "avg_turns_all", "precision", "recall", "f1", "match_rate", "success_rate",
)


# agents: act(state, env, rng) -> value-free system acts

@dataclass
class ExpertAgent:
    def act(self, state: EnvState, env: DialogueEnv, rng) -> tuple[DialogAct, ...]:
        return expert_action(state, env.goal)


@dataclass
class GreedyPolicyAgent:
    """Argmax of a policy network, or of a Q network's values."""

    mlp: object
    action_space: ActionSpace

    @classmethod
    def from_policy(cls, policy: PolicyModel) -> "GreedyPolicyAgent":
        return cls(policy.mlp, policy.action_space)

    def act(self, state, env, rng):
        return self.action_space[int(np.argmax(self.mlp.logits(env.features(state))))]


@dataclass
class RandomAgent:
    action_space: ActionSpace

    def act(self, state, env, rng):
        return self.action_space[int(rng.integers(len(self.action_space)))]


@dataclass
class SilentAgent:
    """Never says anything; a guaranteed failure."""

    def act(self, state, env, rng):
        return ()


@dataclass
class SessionRecord:
    goal: UserGoal
    turns: list[dict]
    closing: str
    offered: dict
    outcome: str
    n_turns: int
    reference_turns: list[dict] = field(default_factory=list)

    def system_acts(self) -> list[tuple[DialogAct, ...]]:
        return [parse_acts(t["system"]) for t in self.turns]

    def reference_acts(self) -> list[tuple[DialogAct, ...]]:
        return [parse_acts(t["system"]) for t in self.reference_turns]

    def to_dict(self) -> dict:
        return {
            "goal": self.goal.to_dict(), "turns": self.turns, "closing": self.closing, "offered": self.offered,
            "outcome": self.outcome, "n_turns": self.n_turns, "reference_turns": self.reference_turns,
        }


@dataclass
class MetricsReport:
    n_sessions: int
    avg_turns_success: float
    avg_turns_all: float
    precision: float
    recall: float
    f1: float
    match_rate: float
    success_rate: float
    per_domain_f1: dict[str, float] = field(default_factory=dict)
    averaging: str = AVERAGING

    def to_json(self) -> str:
        data = asdict(self)
        # NaN is not JSON; no successful session means no success-turn average
        if math.isnan(data["avg_turns_success"]):
            data["avg_turns_success"] = None
        return json.dumps(data, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        if data["avg_turns_success"] is None:
            data["avg_turns_success"] = float("nan")
        return cls(**data)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in TABLE_COLUMNS}

    def to_markdown(self, label: str = "agent") -> str:
        return markdown_table([{"agent": label, **self.row()}])

    def per_domain_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "f1"])
        for d in sorted(self.per_domain_f1):
            w.writerow([d, _fmt(self.per_domain_f1[d])])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def markdown_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c, "")) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def _items(turns: Sequence[Sequence[DialogAct]], domain: Optional[str] = None) -> Counter:
    c = Counter()
    for acts in turns:
        for act in acts:
            if domain is None or act.domain == domain:
                c.update(act.items())
    return c


def _prf(hit: int, n_pred: int, n_ref: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0
    precision = hit / n_pred if n_pred else 0.0
    recall = hit / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision > 0 and recall > 0 else 0.0
    return precision, recall, f1


def _counts(predicted, reference, domain=None) -> tuple[int, int, int]:
    if len(predicted) != len(reference):
        raise InvalidInputError("predicted and reference session counts differ")
    hit = n_pred = n_ref = 0
    for pred_turns, ref_turns in zip(predicted, reference):
        p, r = _items(pred_turns, domain), _items(ref_turns, domain)
        hit += sum((p & r).values())
        n_pred += sum(p.values())
        n_ref += sum(r.values())
    return hit, n_pred, n_ref


def act_prf(predicted, reference) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over act items.

    Each argument holds one entry per session: the list of per-turn act sets.
    Items are counted with multiplicity within a session.
    """
    return _prf(*_counts(predicted, reference))


def per_domain_f1(records: Sequence[SessionRecord]) -> dict[str, float]:
    """F1 restricted to each domain's acts; domains no session touches are left out."""
    pred = [r.system_acts() for r in records]
    ref = [r.reference_acts() for r in records]
    domains = sorted({a.domain for turns in pred + ref for acts in turns for a in acts} - {GENERAL})
    out = {}
    for d in domains:
        out[d] = _prf(*_counts(pred, ref, d))[2]
    return out


def transcript_offers(turns: Sequence[dict], db: EntityDb) -> dict[str, Optional[dict]]:
    """Last entity offered per domain, recovered from lexicalized system acts."""
    offered: dict[str, Optional[dict]] = {}
    for t in turns:
        for act in parse_acts(t["system"]):
            if act.intent == "offer":
                name = dict(act.slot_values).get("name")
                offered[act.domain] = next((dict(e) for e in db[act.domain] if e.get("name") == name), None)
    return offered


def transcript_recall(goal: UserGoal, turns: Sequence[dict]) -> float:
    """Fraction of goal requests the system informed with a real value."""
    told = set()
    for t in turns:
        for act in parse_acts(t["system"]):
            if act.intent == "inform":
                told.update((act.domain, s) for s, v in act.slot_values if v not in (None, UNKNOWN_VALUE))
    wanted = [(d, s) for d in goal.domains for s in goal[d].requests]
    return sum(w in told for w in wanted) / len(wanted) if wanted else 1.0


def match(record: SessionRecord, db: EntityDb) -> bool:
    return session_match(record.goal, transcript_offers(record.turns, db), db)


def success(record: SessionRecord, db: EntityDb) -> bool:
    """Success from the transcript alone: user-closed, recall 1, match 1."""
    user_closed = parse_acts(record.closing) == (DialogAct(GENERAL, "bye"),)
    return user_closed and transcript_recall(record.goal, record.turns) == 1.0 and match(record, db)


def match_rate(records: Sequence[SessionRecord], db: EntityDb) -> float:
    if not records:
        raise InvalidInputError("no sessions")
    return float(np.mean([match(r, db) for r in records]))


def _run_session(env: DialogueEnv, agent, seq: np.random.SeedSequence, with_reference: bool) -> SessionRecord:
    env_seq, agent_seq = seq.spawn(2)
    agent_rng = np.random.default_rng(agent_seq)
    state, _ = env.reset(np.random.default_rng(env_seq))
    goal = env.goal
    done = False
    while not done:
        state, done, _ = env.step(agent.act(state, env, agent_rng))
    offered = {d: e for d, e in state.offered.items() if e is not None}
    record = SessionRecord(goal, list(env.transcript), format_acts(env.closing_acts), offered,
                           state.outcome.value, state.turn_index)
    if with_reference:
        # same environment stream, so the goal and the user's early moves coincide
        expert = ExpertAgent()
        state, _ = env.reset(np.random.default_rng(env_seq))
        done = False
        while not done:
            state, done, _ = env.step(expert.act(state, env, None))
        record.reference_turns = list(env.transcript)
    return record


def _session_chunk(args):
    env_factory, agent, seqs, with_reference = args
    env = env_factory()
    return [_run_session(env, agent, s, with_reference) for s in seqs]


def summarize_records(records: Sequence[SessionRecord], db: EntityDb) -> MetricsReport:
    if not records:
        raise InvalidInputError("no sessions")
    turns = np.array([r.n_turns for r in records], dtype=float)
    ok = np.array([r.outcome == Outcome.SUCCESS.value for r in records])
    p, rc, f = act_prf([r.system_acts() for r in records], [r.reference_acts() for r in records])
    return MetricsReport(
        n_sessions=len(records),
        avg_turns_success=float(turns[ok].mean()) if ok.any() else float("nan"),
        avg_turns_all=float(turns.mean()),
        precision=p, recall=rc, f1=f,
        match_rate=match_rate(records, db),
        success_rate=float(ok.mean()),
        per_domain_f1=per_domain_f1(records),
    )


def run_evaluation(agent, env_factory: Callable[[], DialogueEnv], n_sessions: int, seed: int,
                   workers: int = 1, with_reference: bool = True) -> tuple[MetricsReport, list[SessionRecord]]:
    """Play ``n_sessions`` seeded sessions; each session owns its RNG streams, so workers never change results."""
    if n_sessions < 1:
        raise InvalidInputError("n_sessions must be at least 1")
    seqs = np.random.SeedSequence(seed).spawn(n_sessions)
    if workers <= 1:
        records = _session_chunk((env_factory, agent, seqs, with_reference))
    else:
        chunks = [seqs[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_session_chunk, [(env_factory, agent, c, with_reference) for c in chunks]))
        records = [None] * n_sessions
        for i, part in enumerate(parts):
            records[i::workers] = part
    db = env_factory().db
    return summarize_records(records, db), records
