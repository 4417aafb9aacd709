"""Policy and value networks over state features, plus behavioral cloning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .acts import DialogAct, delexicalize, format_act, parse_act
from .errors import InvalidInputError, NumericalError
from .nn import Adam, Mlp, log_softmax, softmax

POLICY_HIDDEN = (128, 64)


class ActionSpace:
    """Distinct value-free system action sets seen in demonstrations, densely indexed."""

    def __init__(self, action_sets: Iterable[Sequence[DialogAct]]):
        self.actions: list[tuple[DialogAct, ...]] = []
        self.index: dict[tuple[DialogAct, ...], int] = {}
        for acts in action_sets:
            key = delexicalize(acts)
            if key not in self.index:
                self.index[key] = len(self.actions)
                self.actions.append(key)

    @classmethod
    def from_sessions(cls, sessions) -> "ActionSpace":
        sets = [system for s in sessions for _, system in s.pairs()]
        keyed = sorted({delexicalize(a) for a in sets}, key=lambda a: [format_act(x) for x in a])
        return cls(keyed)

    def __len__(self) -> int:
        return len(self.actions)

    def lookup(self, acts: Sequence[DialogAct]) -> int:
        key = delexicalize(acts)
        try:
            return self.index[key]
        except KeyError:
            shown = " ".join(format_act(a) for a in key) or "<empty>"
            raise InvalidInputError(f"action set not in action space: {shown}") from None

    def __getitem__(self, i: int) -> tuple[DialogAct, ...]:
        return self.actions[i]

    def to_list(self) -> list[list[str]]:
        return [[format_act(a) for a in acts] for acts in self.actions]

    @classmethod
    def from_list(cls, rows) -> "ActionSpace":
        return cls([tuple(parse_act(t) for t in row) for row in rows])


@dataclass
class PolicyModel:
    mlp: Mlp
    action_space: ActionSpace

    @classmethod
    def create(cls, n_features: int, action_space: ActionSpace, rng, hidden=POLICY_HIDDEN) -> "PolicyModel":
        mlp = Mlp.create([n_features, *hidden, len(action_space)], rng, "tanh", "softmax")
        return cls(mlp, action_space)

    def distribution(self, features: np.ndarray) -> np.ndarray:
        return self.mlp(features)

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.mlp.copy(), self.action_space)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"mlp": self.mlp.to_dict(), "action_space": self.action_space.to_list()}))

    @classmethod
    def load(cls, path) -> "PolicyModel":
        data = json.loads(Path(path).read_text())
        return cls(Mlp.from_dict(data["mlp"]), ActionSpace.from_list(data["action_space"]))


@dataclass
class ValueModel:
    mlp: Mlp

    @classmethod
    def create(cls, n_features: int, rng, hidden=POLICY_HIDDEN) -> "ValueModel":
        return cls(Mlp.create([n_features, *hidden, 1], rng, "tanh", "identity"))

    def estimate(self, features: np.ndarray):
        out = self.mlp(features)
        return out[..., 0] if out.ndim == 2 else float(out[0])


def policy_distribution(model: PolicyModel, features: np.ndarray) -> np.ndarray:
    return model.distribution(features)


def value_estimate(model: ValueModel, features: np.ndarray):
    return model.estimate(features)


def sample_action(distribution: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(distribution)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(distribution) - 1)


def greedy_action(distribution: np.ndarray) -> int:
    # np.argmax returns the first maximum
    return int(np.argmax(distribution))


@dataclass
class MleConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    validation_fraction: float = 0.1
    hidden: tuple[int, ...] = POLICY_HIDDEN


@dataclass
class MleHistory:
    train_loss: list[float] = field(default_factory=list)
    validation_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1


def cross_entropy_grad(mlp: Mlp, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of class indices ``y`` and its parameter gradients."""
    logits, cache = mlp.forward(x, return_logits=True)
    logp = log_softmax(logits)
    n = len(y)
    loss = -float(logp[np.arange(n), y].mean())
    g = softmax(logits)
    g[np.arange(n), y] -= 1.0
    return loss, mlp.backward(cache, g / n, wrt_logits=True)


def demonstration_dataset(sessions, env, action_space: ActionSpace):
    """Stack (state features, expert action index) over every demonstrated turn, with session ids."""
    xs, ys, groups = [], [], []
    for k, session in enumerate(sessions):
        states = env.replay_states(session.turns)
        for state, (_, system) in zip(states, session.pairs()):
            xs.append(env.features(state))
            ys.append(action_space.lookup(system))
            groups.append(k)
    return np.array(xs), np.array(ys, dtype=np.int64), np.array(groups)


def accuracy(model: PolicyModel, x: np.ndarray, y: np.ndarray) -> float:
    return float((np.argmax(model.mlp.logits(x), axis=1) == y).mean())


def mle_pretrain(
    x: np.ndarray,
    y: np.ndarray,
    groups: np.ndarray,
    action_space: ActionSpace,
    config: MleConfig,
    rng: np.random.Generator,
    model: Optional[PolicyModel] = None,
) -> tuple[PolicyModel, MleHistory]:
    """Behavioral cloning by cross-entropy; validation split is by dialogue.

    Returns the parameters from the epoch with the best validation accuracy,
    ties broken by validation loss.
    """
    if len(x) == 0:
        raise InvalidInputError("empty demonstration set")
    if model is None:
        model = PolicyModel.create(x.shape[1], action_space, rng, config.hidden)
    uniq = np.unique(groups)
    n_val = int(round(len(uniq) * config.validation_fraction))
    val_groups = set(rng.permutation(uniq)[:n_val].tolist()) if len(uniq) > 1 and n_val > 0 else set()
    val_mask = np.array([g in val_groups for g in groups])
    xt, yt = x[~val_mask], y[~val_mask]
    xv, yv = (x[val_mask], y[val_mask]) if val_mask.any() else (xt, yt)

    opt = Adam(config.learning_rate)
    history = MleHistory()
    best = ((-1.0, -np.inf), model.mlp.copy())
    for epoch in range(config.epochs):
        order = rng.permutation(len(xt))
        losses = []
        for start in range(0, len(xt), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = cross_entropy_grad(model.mlp, xt[idx], yt[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"behavioral cloning diverged in epoch {epoch}")
            opt.step(model.mlp, grads)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))
        acc = accuracy(model, xv, yv)
        history.validation_accuracy.append(acc)
        # ties in accuracy go to the lower validation cross-entropy
        key = (acc, -float(-log_softmax(model.mlp.logits(xv))[np.arange(len(yv)), yv].mean()))
        if key > best[0]:
            best = (key, model.mlp.copy())
            history.best_epoch = epoch
    model.mlp.load_from(best[1])
    return model, history
