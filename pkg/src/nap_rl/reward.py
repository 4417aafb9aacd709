"""Reward composition: the sparse global signal, the classifier's local signal, or both."""

from __future__ import annotations

import math
from enum import Enum

from .errors import InvalidInputError


class RewardMode(str, Enum):
    GLOBAL = "global"
    LOCAL = "local"
    COMBINED = "comb"

    @classmethod
    def parse(cls, text: str) -> "RewardMode":
        aliases = {"global_only": "global", "local_only": "local", "combined": "comb",
                   "human": "global", "classifier": "local", "both": "comb"}
        try:
            return cls(aliases.get(text, text))
        except ValueError:
            raise InvalidInputError(f"unknown reward mode {text!r}") from None


def local_reward(score: float) -> float:
    """Map a classifier confidence in [0, 1] affinely onto [-1, 1]."""
    if not (0.0 <= score <= 1.0) or math.isnan(score):
        raise InvalidInputError(f"score {score!r} outside [0, 1]")
    return -1.0 + 2.0 * score


def shape(global_reward: float, score: float, mode: RewardMode) -> float:
    mode = RewardMode(mode)
    if mode is RewardMode.GLOBAL:
        if not (0.0 <= score <= 1.0):
            raise InvalidInputError(f"score {score!r} outside [0, 1]")
        return global_reward
    if mode is RewardMode.LOCAL:
        return local_reward(score)
    return global_reward + local_reward(score)
