"""Dialog acts, action sets, and their multi-hot encodings.

An act is written ``[domain][intent]{slot=value;slot2=value2}``. A slot
without a value (as in a request) is written bare: ``{phone}``.

A (user, system) pair is encoded as two concatenated multi-hot vectors over
(domain, intent, slot) items; this fixed encoding stands in for a learned
text encoder.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ActParseError, InvalidInputError

NO_SLOT = "none"
# pseudo-domain for domain-free acts such as bye
GENERAL = "general"

_IDENT = re.compile(r"[a-z0-9_]+")
_VALUE = re.compile(r"[^;=}\[\]{]+")


@dataclass(frozen=True)
class DialogAct:
    domain: str
    intent: str
    slot_values: tuple[tuple[str, Optional[str]], ...] = ()

    def __post_init__(self):
        slots = [s for s, _ in self.slot_values]
        if len(set(slots)) != len(slots):
            raise InvalidInputError(f"duplicate slot in act {slots}")

    @classmethod
    def make(cls, domain: str, intent: str, *slots, **values) -> "DialogAct":
        """``make("hotel", "request", "phone")`` or ``make("hotel", "inform", area="north")``."""
        pairs = [(s, None) for s in slots] + [(s, str(v)) for s, v in values.items()]
        return cls(domain, intent, tuple(sorted(pairs, key=_pair_key)))

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.slot_values)

    def items(self) -> list[tuple[str, str, str]]:
        """(domain, intent, slot) triples, with NO_SLOT for slot-free acts."""
        if not self.slot_values:
            return [(self.domain, self.intent, NO_SLOT)]
        return [(self.domain, self.intent, s) for s, _ in self.slot_values]

    def delexicalized(self) -> "DialogAct":
        return DialogAct(self.domain, self.intent, tuple((s, None) for s, _ in self.slot_values))

    def __str__(self) -> str:
        return format_act(self)


def _pair_key(pair):
    slot, value = pair
    return (slot, "" if value is None else value)


def _act_key(act: DialogAct):
    return (act.domain, act.intent, tuple(sorted(_pair_key(p) for p in act.slot_values)))


ActionSet = tuple  # canonical tuple of DialogAct


def canonicalize(acts: Iterable[DialogAct], ontology=None) -> tuple[DialogAct, ...]:
    """Sort acts by (domain, intent, slots) and drop exact duplicates.

    With an ontology, every symbol is checked and the first unknown one
    is reported.
    """
    normalized = []
    for act in acts:
        if ontology is not None:
            ontology.check_act(act)
        normalized.append(DialogAct(act.domain, act.intent, tuple(sorted(act.slot_values, key=_pair_key))))
    unique = {_act_key(a): a for a in normalized}
    return tuple(unique[k] for k in sorted(unique))


def delexicalize(acts: Iterable[DialogAct]) -> tuple[DialogAct, ...]:
    return canonicalize(a.delexicalized() for a in acts)


def format_act(act: DialogAct) -> str:
    pairs = ";".join(s if v is None else f"{s}={v}" for s, v in act.slot_values)
    return f"[{act.domain}][{act.intent}]{{{pairs}}}"


def format_acts(acts: Sequence[DialogAct]) -> list[str]:
    return [format_act(a) for a in acts]


def parse_act(text: str) -> DialogAct:
    pos = 0

    def expect(ch):
        nonlocal pos
        if pos >= len(text) or text[pos] != ch:
            raise ActParseError(f"expected {ch!r}", pos)
        pos += 1

    def ident():
        nonlocal pos
        m = _IDENT.match(text, pos)
        if not m:
            raise ActParseError("expected lowercase identifier", pos)
        pos = m.end()
        return m.group()

    expect("[")
    domain = ident()
    expect("]")
    expect("[")
    intent = ident()
    expect("]")
    expect("{")
    pairs: list[tuple[str, Optional[str]]] = []
    if pos < len(text) and text[pos] != "}":
        while True:
            start = pos
            slot = ident()
            value = None
            if pos < len(text) and text[pos] == "=":
                pos += 1
                m = _VALUE.match(text, pos)
                if not m:
                    raise ActParseError("expected value", pos)
                value = m.group()
                pos = m.end()
            if any(s == slot for s, _ in pairs):
                raise ActParseError(f"duplicate slot {slot!r}", start)
            pairs.append((slot, value))
            if pos < len(text) and text[pos] == ";":
                pos += 1
                continue
            break
    expect("}")
    if pos != len(text):
        raise ActParseError("trailing characters", pos)
    return DialogAct(domain, intent, tuple(sorted(pairs, key=_pair_key)))


def parse_acts(texts: Iterable[str]) -> tuple[DialogAct, ...]:
    return canonicalize(parse_act(t) for t in texts)


class ActVocabulary:
    """Bijection between (domain, intent, slot) items and dense indices."""

    def __init__(self, items: Iterable[tuple[str, str, str]]):
        self.items: list[tuple[str, str, str]] = sorted(set(items))
        self.index = {item: i for i, item in enumerate(self.items)}

    def __len__(self) -> int:
        return len(self.items)

    def lookup(self, item: tuple[str, str, str]) -> int:
        try:
            return self.index[item]
        except KeyError:
            raise InvalidInputError(f"act item {item} not in vocabulary") from None

    def invert(self, i: int) -> tuple[str, str, str]:
        return self.items[i]

    def digest(self) -> str:
        return hashlib.sha256("\n".join("/".join(i) for i in self.items).encode()).hexdigest()[:16]

    def to_list(self) -> list[list[str]]:
        return [list(i) for i in self.items]

    @classmethod
    def from_list(cls, items) -> "ActVocabulary":
        return cls(tuple(i) for i in items)


def encode_single(acts: Sequence[DialogAct], vocab: ActVocabulary) -> np.ndarray:
    vec = np.zeros(len(vocab))
    for act in acts:
        for item in act.items():
            vec[vocab.lookup(item)] = 1.0
    return vec


def encode_pair(user_acts: Sequence[DialogAct], system_acts: Sequence[DialogAct], vocab: ActVocabulary) -> np.ndarray:
    """Concatenated multi-hot of the user block then the system block; values are ignored."""
    return np.concatenate([encode_single(user_acts, vocab), encode_single(system_acts, vocab)])
