"""Next-action prediction: is this system act set a fitting reply to the user's acts?

A binary classifier over concatenated multi-hot (user, system) act
encodings, trained on pairs from expert demonstrations. Negatives keep the
user acts and borrow a system reply from a different dialogue. Once
trained, the model is only ever read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .acts import ActVocabulary, DialogAct, encode_pair
from .errors import InvalidInputError, NumericalError
from .nn import Adam, Mlp

POSITIVE, NEGATIVE = 1, 0


@dataclass(frozen=True)
class PairExample:
    user_acts: tuple[DialogAct, ...]
    system_acts: tuple[DialogAct, ...]
    label: int
    dialogue: int


@dataclass
class PairSplits:
    train: list[PairExample]
    validation: list[PairExample]
    test: list[PairExample]


def build_pair_dataset(
    sessions: Sequence,
    rng: np.random.Generator,
    negatives_per_positive: int = 1,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> PairSplits:
    """One positive per demonstrated turn plus ``negatives_per_positive`` negatives.

    Splits are made at the dialogue level, so no transcript contributes
    examples to two splits.
    """
    if negatives_per_positive < 1:
        raise InvalidInputError("negatives_per_positive must be >= 1")
    if len(sessions) < 2:
        raise InvalidInputError("need at least two dialogues to draw negatives")
    pairs = [s.pairs() for s in sessions]
    pool = [(k, system) for k, ps in enumerate(pairs) for _, system in ps]
    owner = np.array([k for k, _ in pool])
    examples: dict[int, list[PairExample]] = {}
    for k, ps in enumerate(pairs):
        out = []
        others = np.flatnonzero(owner != k)
        for user, system in ps:
            out.append(PairExample(user, system, POSITIVE, k))
            for j in rng.choice(others, size=negatives_per_positive):
                out.append(PairExample(user, pool[j][1], NEGATIVE, k))
        examples[k] = out
    order = rng.permutation(len(sessions))
    n_train = int(round(fractions[0] * len(sessions)))
    n_val = int(round(fractions[1] * len(sessions)))
    chunks = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return PairSplits(*[[e for k in sorted(chunk) for e in examples[k]] for chunk in chunks])


def encode_examples(examples: Sequence[PairExample], vocab: ActVocabulary) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([encode_pair(e.user_acts, e.system_acts, vocab) for e in examples]).reshape(len(examples), -1)
    y = np.array([e.label for e in examples], dtype=np.float64)
    return x, y


@dataclass
class DiscriminatorConfig:
    hidden: tuple[int, ...] = (64, 32)
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5


@dataclass
class TrainingHistory:
    loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    validation_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1


class DiscriminatorModel:
    """Frozen scorer; parameters are copied in and never exposed for update."""

    def __init__(self, mlp: Mlp, vocab: ActVocabulary, metadata: Optional[dict] = None):
        if mlp.output_activation != "sigmoid" or mlp.n_outputs != 1:
            raise InvalidInputError("discriminator needs a width-1 sigmoid head")
        if mlp.n_inputs != 2 * len(vocab):
            raise InvalidInputError("network input does not match vocabulary")
        self._mlp = mlp.copy()
        for a in self._mlp.arrays():
            a.flags.writeable = False
        self.vocab = vocab
        self.metadata = dict(metadata or {})

    @property
    def parameters(self) -> list[np.ndarray]:
        return self._mlp.arrays()

    def score(self, user_acts, system_acts) -> float:
        return float(self._mlp(encode_pair(user_acts, system_acts, self.vocab))[0])

    def score_batch(self, pairs: Sequence[tuple]) -> np.ndarray:
        if not pairs:
            return np.zeros(0)
        x = np.array([encode_pair(u, s, self.vocab) for u, s in pairs])
        return self._mlp(x)[:, 0]

    def score_features(self, x: np.ndarray) -> np.ndarray:
        return self._mlp(x)[:, 0]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "mlp": self._mlp.to_dict(),
            "vocabulary": self.vocab.to_list(),
            "vocabulary_digest": self.vocab.digest(),
            "metadata": self.metadata,
        }))

    @classmethod
    def load(cls, path) -> "DiscriminatorModel":
        data = json.loads(Path(path).read_text())
        vocab = ActVocabulary.from_list(data["vocabulary"])
        if vocab.digest() != data["vocabulary_digest"]:
            raise InvalidInputError("vocabulary digest mismatch in discriminator checkpoint")
        return cls(Mlp.from_dict(data["mlp"]), vocab, data.get("metadata"))


def score(model: DiscriminatorModel, user_acts, system_acts) -> float:
    return model.score(user_acts, system_acts)


def bce_grad(mlp: Mlp, x: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and gradients, taken through the logit."""
    logits, cache = mlp.forward(x, return_logits=True)
    z = logits[:, 0]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    g = ((p - y) / len(y))[:, None]
    return loss, mlp.backward(cache, g, wrt_logits=True)


def _accuracy(mlp: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    return float(((mlp(x)[:, 0] > 0.5) == (y > 0.5)).mean())


def train_discriminator(
    splits: PairSplits,
    vocab: ActVocabulary,
    config: DiscriminatorConfig,
    rng: np.random.Generator,
    shuffle_labels: bool = False,
) -> tuple[DiscriminatorModel, TrainingHistory]:
    """Adam on binary cross-entropy with early stopping on validation accuracy.

    ``shuffle_labels`` permutes training and validation labels; it exists
    for the no-signal control.
    """
    if not splits.train or not splits.validation:
        raise InvalidInputError("train and validation splits must be nonempty")
    xt, yt = encode_examples(splits.train, vocab)
    xv, yv = encode_examples(splits.validation, vocab)
    if shuffle_labels:
        yt = rng.permutation(yt)
        yv = rng.permutation(yv)
    mlp = Mlp.create([2 * len(vocab), *config.hidden, 1], rng, "tanh", "sigmoid")
    opt = Adam(config.learning_rate)
    history = TrainingHistory()
    best_acc, best, stale = -1.0, mlp.copy(), 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(xt))
        losses = []
        for start in range(0, len(xt), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = bce_grad(mlp, xt[idx], yt[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"discriminator loss diverged in epoch {epoch}")
            opt.step(mlp, grads)
            losses.append(loss)
        history.loss.append(float(np.mean(losses)))
        history.train_accuracy.append(_accuracy(mlp, xt, yt))
        acc = _accuracy(mlp, xv, yv)
        history.validation_accuracy.append(acc)
        if acc > best_acc:
            best_acc, best, stale = acc, mlp.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    meta = {"epochs": len(history.loss), "best_epoch": history.best_epoch, "validation_accuracy": best_acc}
    return DiscriminatorModel(best, vocab, meta), history


def evaluate_accuracy(model, examples: Sequence[PairExample]) -> float:
    """Fraction of examples whose score falls on the labelled side of 0.5."""
    if not examples:
        raise InvalidInputError("cannot evaluate on an empty example set")
    scores = np.array([model.score(e.user_acts, e.system_acts) for e in examples])
    labels = np.array([e.label for e in examples])
    return float(((scores > 0.5) == (labels == POSITIVE)).mean())
