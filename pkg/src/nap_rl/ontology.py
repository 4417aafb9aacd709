"""Domain schema, entity database, and user-goal sampling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .acts import GENERAL, DialogAct
from .errors import InvalidInputError

SUPPORTED_VERSIONS = (1,)
REQUIRED_INTENTS = ("inform", "request", "offer", "bye", "greet", "nooffer")
DONTCARE = "dontcare"

GOAL_DOMAIN_PROBS = (0.5, 0.35, 0.15)
MAX_GOAL_ATTEMPTS = 1000


class OntologyError(InvalidInputError):
    """Validation failure; ``problems`` lists every located violation."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class DomainSchema:
    name: str
    informable: dict[str, tuple[str, ...]]
    requestable: tuple[str, ...]

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(self.informable) + tuple(s for s in self.requestable if s not in self.informable)


@dataclass(frozen=True)
class Ontology:
    domains: tuple[DomainSchema, ...]
    intents: tuple[str, ...]
    digest: str = ""

    def domain(self, name: str) -> DomainSchema:
        for d in self.domains:
            if d.name == name:
                return d
        raise InvalidInputError(f"unknown domain {name!r}")

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def check_act(self, act: DialogAct) -> None:
        if act.intent not in self.intents:
            raise InvalidInputError(f"unknown intent {act.intent!r}")
        if act.domain == GENERAL:
            if act.slot_values:
                raise InvalidInputError(f"general act cannot carry slots: {act.slots}")
            return
        schema = self.domain(act.domain)
        for slot in act.slots:
            if slot not in schema.slots:
                raise InvalidInputError(f"unknown slot {slot!r} in domain {act.domain!r}")


@dataclass(frozen=True)
class EntityDb:
    entities: dict[str, tuple[dict[str, str], ...]]

    def __getitem__(self, domain: str) -> tuple[dict[str, str], ...]:
        return self.entities.get(domain, ())


@dataclass(frozen=True)
class DomainGoal:
    constraints: dict[str, str]
    requests: tuple[str, ...]


@dataclass(frozen=True)
class UserGoal:
    """Per-domain constraints and requests, in the order the user pursues them."""

    domains: tuple[str, ...]
    parts: dict[str, DomainGoal] = field(default_factory=dict)

    def __getitem__(self, domain: str) -> DomainGoal:
        return self.parts[domain]

    def to_dict(self) -> dict:
        return {
            "domains": list(self.domains),
            "parts": {
                d: {"constraints": dict(self.parts[d].constraints), "requests": list(self.parts[d].requests)}
                for d in self.domains
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "UserGoal":
        parts = {
            d: DomainGoal(dict(p["constraints"]), tuple(p["requests"])) for d, p in data["parts"].items()
        }
        return cls(tuple(data["domains"]), parts)


def parse_ontology(doc: Mapping) -> tuple[Ontology, EntityDb]:
    problems: list[str] = []
    if doc.get("version") not in SUPPORTED_VERSIONS:
        raise OntologyError([f"version: unsupported schema version {doc.get('version')!r}"])
    raw_domains = doc.get("domains") or []
    if not raw_domains:
        raise OntologyError(["domains: empty domain list"])
    domains = []
    seen = set()
    for i, rd in enumerate(raw_domains):
        name = rd.get("name")
        where = f"domains[{i}]"
        if not name:
            problems.append(f"{where}: missing name")
            continue
        if name in seen or name == GENERAL:
            problems.append(f"{where}: duplicate or reserved domain name {name!r}")
        seen.add(name)
        informable = {s: tuple(v) for s, v in (rd.get("informable") or {}).items()}
        requestable = tuple(rd.get("requestable") or ())
        for slot, values in informable.items():
            if len(values) < 2:
                problems.append(f"{where}.informable.{slot}: needs at least 2 values")
            if len(set(values)) != len(values):
                problems.append(f"{where}.informable.{slot}: duplicate values")
        if not requestable:
            problems.append(f"{where}.requestable: empty")
        if len(set(requestable)) != len(requestable):
            problems.append(f"{where}.requestable: duplicate slots")
        if not informable:
            problems.append(f"{where}.informable: empty")
        domains.append(DomainSchema(name, informable, requestable))
    if len(domains) < 3:
        problems.append(f"domains: need at least 3 domains, found {len(domains)}")
    intents = tuple(doc.get("intents") or ())
    for intent in REQUIRED_INTENTS:
        if intent not in intents:
            problems.append(f"intents: missing required intent {intent!r}")

    by_name = {d.name: d for d in domains}
    raw_entities = doc.get("entities") or {}
    entities: dict[str, tuple[dict[str, str], ...]] = {}
    for dname, rows in raw_entities.items():
        if dname not in by_name:
            problems.append(f"entities.{dname}: undeclared domain")
            continue
        schema = by_name[dname]
        clean = []
        for j, row in enumerate(rows):
            where = f"entities.{dname}[{j}]"
            for slot in row:
                if slot not in schema.slots:
                    problems.append(f"{where}: undeclared slot {slot!r}")
            for slot in schema.slots:
                if slot not in row:
                    problems.append(f"{where}: missing slot {slot!r}")
            for slot, values in schema.informable.items():
                if slot in row and str(row[slot]) not in values:
                    problems.append(f"{where}.{slot}: value {row[slot]!r} not declared")
            clean.append({k: str(v) for k, v in row.items()})
        entities[dname] = tuple(clean)
    if problems:
        raise OntologyError(problems)
    canonical = json.dumps(doc, sort_keys=True).encode()
    ontology = Ontology(tuple(domains), intents, hashlib.sha256(canonical).hexdigest()[:16])
    return ontology, EntityDb(entities)


def load_ontology(path: Optional[str | Path] = None) -> tuple[Ontology, EntityDb]:
    """Load and validate an ontology document; ``None`` loads the bundled 3-domain file."""
    if path is None:
        text = resources.files("nap_rl.data").joinpath("default_ontology.json").read_text()
    else:
        text = Path(path).read_text()
    return parse_ontology(json.loads(text))


def query_entities(
    ontology: Ontology, db: EntityDb, domain: str, constraints: Mapping[str, str]
) -> list[dict[str, str]]:
    """Entities of ``domain`` whose values equal every constraint, in DB order."""
    schema = ontology.domain(domain)
    for slot in constraints:
        if slot not in schema.informable:
            raise InvalidInputError(f"slot {slot!r} is not informable in {domain!r}")
    items = list(constraints.items())
    return [e for e in db[domain] if all(e[s] == v for s, v in items)]


def sample_goal(
    rng: np.random.Generator, ontology: Ontology, db: EntityDb, domains: Optional[tuple[str, ...]] = None
) -> UserGoal:
    """Random goal over 1-3 domains; ``domains`` pins the goal to exactly those domains."""
    if domains:
        for d in domains:
            ontology.domain(d)
        chosen = list(domains)
    else:
        names = ontology.domain_names
        n_domains = int(rng.choice(len(GOAL_DOMAIN_PROBS), p=GOAL_DOMAIN_PROBS)) + 1
        n_domains = min(n_domains, len(names))
        chosen = [names[i] for i in rng.choice(len(names), size=n_domains, replace=False)]
    parts = {}
    for dname in chosen:
        schema = ontology.domain(dname)
        slots = list(schema.informable)
        for _ in range(MAX_GOAL_ATTEMPTS):
            k = int(rng.integers(1, min(3, len(slots)) + 1))
            picked = sorted(rng.choice(len(slots), size=k, replace=False))
            constraints = {
                slots[i]: schema.informable[slots[i]][int(rng.integers(len(schema.informable[slots[i]])))]
                for i in picked
            }
            # domains without entities have nothing to satisfy
            if not db[dname] or query_entities(ontology, db, dname, constraints):
                break
        else:
            raise InvalidInputError(f"no satisfiable goal for {dname!r} after {MAX_GOAL_ATTEMPTS} attempts")
        n_req = int(rng.integers(1, min(2, len(schema.requestable)) + 1))
        req_idx = sorted(rng.choice(len(schema.requestable), size=n_req, replace=False))
        parts[dname] = DomainGoal(constraints, tuple(schema.requestable[i] for i in req_idx))
    return UserGoal(tuple(chosen), parts)


def act_vocabulary(ontology: Ontology):
    """Every (domain, intent, slot) item the simulator, environment, or expert can emit."""
    from .acts import NO_SLOT, ActVocabulary

    items = [(GENERAL, "bye", NO_SLOT), (GENERAL, "greet", NO_SLOT)]
    for d in ontology.domains:
        for slot in d.informable:
            items.append((d.name, "inform", slot))
            items.append((d.name, "request", slot))
        for slot in d.requestable:
            items.append((d.name, "inform", slot))
            items.append((d.name, "request", slot))
        items.append((d.name, "offer", "name"))
        items.append((d.name, "nooffer", NO_SLOT))
    return ActVocabulary(items)
