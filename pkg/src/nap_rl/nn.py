"""Small multilayer perceptrons with hand-written backprop and Adam.

Everything is float64. Inputs may be a single vector or a batch of row
vectors; outputs follow the same shape convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericalError

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")
CHECKPOINT_VERSION = 1

# sigmoid(35) < 1 - 2**-53, so clipped logits keep the head strictly inside (0, 1)
_SIGMOID_LOGIT_CLIP = 35.0


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -_SIGMOID_LOGIT_CLIP, _SIGMOID_LOGIT_CLIP)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def scale(self, factor: float) -> "Grads":
        return Grads([w * factor for w in self.weights], [b * factor for b in self.biases])

    def __add__(self, other: "Grads") -> "Grads":
        return Grads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations from one forward call."""

    owner: int
    version: int
    batched: bool
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


@dataclass
class Mlp:
    """Fully connected network. ``weights[k]`` has shape (out_k, in_k)."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(int(n) <= 0 for n in self.layer_sizes):
            raise InvalidInputError(f"bad layer sizes {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidInputError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidInputError(f"unknown output activation {self.output_activation!r}")
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise InvalidInputError("weights/biases do not match layer count")
        for k in range(n_layers):
            expected = (self.layer_sizes[k + 1], self.layer_sizes[k])
            self.weights[k] = np.asarray(self.weights[k], dtype=np.float64)
            self.biases[k] = np.asarray(self.biases[k], dtype=np.float64)
            if self.weights[k].shape != expected:
                raise InvalidInputError(
                    f"layer {k}: weight shape {self.weights[k].shape}, expected {expected}"
                )
            if self.biases[k].shape != (expected[0],):
                raise InvalidInputError(f"layer {k}: bias shape {self.biases[k].shape}")
            if not (np.all(np.isfinite(self.weights[k])) and np.all(np.isfinite(self.biases[k]))):
                raise InvalidInputError(f"layer {k}: non-finite parameters")

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_sizes), weights, biases, hidden_activation, output_activation)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], hidden_activation="tanh", output_activation="identity") -> "Mlp":
        weights = [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
        biases = [np.zeros(o) for o in layer_sizes[1:]]
        return cls(list(layer_sizes), weights, biases, hidden_activation, output_activation)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    def load_from(self, other: "Mlp") -> None:
        """Overwrite parameters in place with a bit-exact copy of ``other``'s."""
        if other.layer_sizes != self.layer_sizes:
            raise InvalidInputError("layer sizes differ")
        for dst, src in zip(self.arrays(), other.arrays()):
            dst[...] = src
        self.version += 1

    def _hidden(self, z):
        return np.tanh(z) if self.hidden_activation == "tanh" else np.maximum(z, 0.0)

    def _head(self, z):
        if self.output_activation == "sigmoid":
            return sigmoid(z)
        if self.output_activation == "softmax":
            return softmax(z)
        return z

    def forward(self, x, return_logits: bool = False):
        """Returns ``(output, cache)``; with ``return_logits`` the head is skipped in the output."""
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_inputs:
            raise InvalidInputError(f"input shape {x.shape} does not fit {self.n_inputs} inputs")
        h = x if batched else x[None, :]
        inputs, preacts = [], []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w.T + b
            preacts.append(z)
            h = self._hidden(z) if k < last else z
        out = h if return_logits else self._head(h)
        cache = ForwardCache(id(self), self.version, batched, inputs, preacts, out)
        return (out if batched else out[0]), cache

    def logits(self, x) -> np.ndarray:
        return self.forward(x, return_logits=True)[0]

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad, wrt_logits: bool = False) -> Grads:
        """Parameter gradients of ``sum(grad * output)``.

        With ``wrt_logits`` the supplied gradient is taken with respect to the
        pre-head logits, which is the numerically clean route for
        cross-entropy style losses.
        """
        if cache.owner != id(self) or cache.version != self.version:
            raise InvalidInputError("stale or foreign forward cache")
        g = np.asarray(grad, dtype=np.float64)
        if not cache.batched:
            g = g[None, :]
        z_out = cache.preacts[-1]
        if g.shape != z_out.shape:
            raise InvalidInputError(f"output gradient shape {g.shape} != {z_out.shape}")
        if not wrt_logits:
            if self.output_activation == "sigmoid":
                s = sigmoid(z_out)
                g = g * s * (1.0 - s)
            elif self.output_activation == "softmax":
                p = softmax(z_out)
                g = p * (g - (g * p).sum(axis=1, keepdims=True))
        n_layers = len(self.weights)
        dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        for k in range(n_layers - 1, -1, -1):
            dws[k] = g.T @ cache.inputs[k]
            dbs[k] = g.sum(axis=0)
            if k > 0:
                g = g @ self.weights[k]
                z = cache.preacts[k - 1]
                if self.hidden_activation == "tanh":
                    g = g * (1.0 - np.tanh(z) ** 2)
                else:
                    g = g * (z > 0)
        return Grads(dws, dbs)

    # -- checkpoints -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        if data.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {data.get('version')!r}")
        sizes = data["layer_sizes"]
        weights = [
            np.asarray(flat, dtype=np.float64).reshape(o, i)
            for flat, i, o in zip(data["weights"], sizes[:-1], sizes[1:])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        return cls(sizes, weights, biases, data["hidden_activation"], data["output_activation"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Adam:
    """Bias-corrected Adam bound to one network's parameter shapes."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise InvalidInputError("learning rate and epsilon must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidInputError("betas must lie in (0, 1)")

    def step(self, params: Mlp, grads: Grads) -> None:
        arrays = params.arrays()
        garrays = grads.arrays()
        if len(arrays) != len(garrays) or any(a.shape != g.shape for a, g in zip(arrays, garrays)):
            raise InvalidInputError("gradient shapes do not match parameters")
        for i, g in enumerate(garrays):
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter array {i}; update rejected")
        if not self.first_moment:
            self.first_moment = [np.zeros_like(a) for a in arrays]
            self.second_moment = [np.zeros_like(a) for a in arrays]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for a, g, m, v in zip(arrays, garrays, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
        params.version += 1
