"""Off-policy variant: Q-learning with replay, a periodically synced target, and shaped rewards.

Rewards follow three branches: the user's reward alone ("human"), the
remapped classifier score alone ("classifier"), or their sum ("both").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .env import DialogueEnv, global_reward
from .errors import InvalidInputError, NumericalError, UsageError
from .nn import Adam, Mlp
from .policy import POLICY_HIDDEN, ActionSpace, PolicyModel
from .ppo import CurveRecord, play_episodes, summarize
from .reward import RewardMode

BRANCH_HUMAN, BRANCH_CLASSIFIER, BRANCH_BOTH = "human", "classifier", "both"
_BRANCH_OF_MODE = {
    RewardMode.GLOBAL: BRANCH_HUMAN,
    RewardMode.LOCAL: BRANCH_CLASSIFIER,
    RewardMode.COMBINED: BRANCH_BOTH,
}


def branch_reward(r_human: float, r_classifier: float, branch: str) -> float:
    """Stored reward for one transition; ``r_classifier`` is the raw score in [0, 1]."""
    if branch == BRANCH_HUMAN:
        return r_human
    if branch == BRANCH_CLASSIFIER:
        r_classifier = -1 + 2 * r_classifier
        return r_classifier
    if branch == BRANCH_BOTH:
        r_classifier = -1 + 2 * r_classifier
        return r_classifier + r_human
    raise InvalidInputError(f"unknown reward branch {branch!r}")


class ReplayBuffer:
    """Bounded FIFO of (state, action, reward, next state, done)."""

    def __init__(self, capacity: int, n_features: int):
        if capacity < 1:
            raise InvalidInputError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, n_features))
        self.next_states = np.zeros((capacity, n_features))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action: int, reward: float, next_state, done: bool) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def ordered(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size > self.size:
            raise InvalidInputError(f"buffer holds {self.size} < batch {batch_size}")
        return rng.choice(self.size, size=batch_size, replace=False)


@dataclass
class QModel:
    mlp: Mlp
    action_space: ActionSpace

    @classmethod
    def create(cls, n_features: int, action_space: ActionSpace, rng, hidden=POLICY_HIDDEN) -> "QModel":
        return cls(Mlp.create([n_features, *hidden, len(action_space)], rng, "tanh", "identity"), action_space)

    def values(self, features):
        return self.mlp(features)

    def copy(self) -> "QModel":
        return QModel(self.mlp.copy(), self.action_space)

    def as_policy(self) -> PolicyModel:
        """Greedy-equivalent softmax view, so the shared episode runner can play it."""
        mlp = self.mlp.copy()
        mlp.output_activation = "softmax"
        return PolicyModel(mlp, self.action_space)


class TargetSync:
    """Copies the online network into the target after every ``period`` updates."""

    def __init__(self, period: int):
        if period < 1:
            raise InvalidInputError("sync period must be >= 1")
        self.period = period
        self.counter = 0

    def __call__(self, q: QModel, target: QModel) -> bool:
        self.counter += 1
        if self.counter % self.period == 0:
            target.mlp.load_from(q.mlp)
            return True
        return False


def sync_target(q: QModel, target: QModel, counter: int, period: int) -> bool:
    if counter > 0 and counter % period == 0:
        target.mlp.load_from(q.mlp)
        return True
    return False


def td_loss(q: QModel, target: QModel, states, actions, rewards, next_states, dones, gamma: float):
    """Mean squared TD error with y = r (+ gamma * max target Q if not terminal)."""
    n = len(actions)
    idx = np.arange(n)
    boot = target.values(next_states).max(axis=1)
    y = rewards + gamma * boot * (~dones)
    out, cache = q.mlp.forward(states)
    err = out[idx, actions] - y
    g = np.zeros_like(out)
    g[idx, actions] = 2.0 * err / n
    return float(np.mean(err**2)), q.mlp.backward(cache, g), y


def dqn_update(buffer: ReplayBuffer, q: QModel, target: QModel, gamma: float, batch_size: int,
               opt: Adam, rng: np.random.Generator) -> Optional[float]:
    """One minibatch step; returns the loss, or None when the buffer is too small."""
    if len(buffer) < batch_size:
        return None
    idx = buffer.sample(batch_size, rng)
    loss, grads, _ = td_loss(q, target, buffer.states[idx], buffer.actions[idx], buffer.rewards[idx],
                             buffer.next_states[idx], buffer.dones[idx], gamma)
    if not np.isfinite(loss):
        raise NumericalError("TD loss is not finite")
    opt.step(q.mlp, grads)
    return loss


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


def collect_step(env: DialogueEnv, state, q: QModel, epsilon: float, discriminator, mode: RewardMode,
                 buffer: ReplayBuffer, rng: np.random.Generator):
    """Act epsilon-greedily for one turn and store the branch-shaped transition.

    Returns ``(next_state, done, stored_reward)``.
    """
    branch = _BRANCH_OF_MODE[RewardMode(mode)]
    if branch != BRANCH_HUMAN and discriminator is None:
        raise UsageError(f"reward branch {branch!r} needs a trained discriminator")
    x = env.features(state)
    a = epsilon_greedy(q.values(x), epsilon, rng)
    user_acts = state.last_user_acts
    next_state, done, info = env.step(q.action_space[a])
    r_human = global_reward(next_state)
    r_classifier = discriminator.score(user_acts, info["system_acts"]) if discriminator is not None else 0.5
    r = branch_reward(r_human, r_classifier, branch)
    x_next = np.zeros_like(x) if done else env.features(next_state)
    buffer.add(x, a, r, x_next, done)
    return next_state, done, r


def supervised_q_init(q: QModel, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                      epochs: int = 10, batch_size: int = 64, lr: float = 1e-3) -> list[float]:
    """Regress Q toward 1 on demonstrated actions and 0 elsewhere."""
    targets = np.zeros((len(y), len(q.action_space)))
    targets[np.arange(len(y)), y] = 1.0
    opt = Adam(lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            out, cache = q.mlp.forward(x[idx])
            diff = out - targets[idx]
            opt.step(q.mlp, q.mlp.backward(cache, 2.0 * diff / diff.size))
        losses.append(float(np.mean((q.values(x) - targets) ** 2)))
    return losses


@dataclass
class DqnConfig:
    gamma: float = 0.99
    capacity: int = 50_000
    batch_size: int = 64
    target_period: int = 200
    learning_rate: float = 1e-3
    epochs: int = 40
    episodes_per_epoch: int = 32
    updates_per_episode: int = 4
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    eval_sessions: int = 64


def epsilon_at(config: DqnConfig, epoch: int) -> float:
    """Linear decay over the first half of training, then constant."""
    horizon = max(config.epochs // 2, 1)
    frac = min(epoch / horizon, 1.0)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def train_dqn(
    env_factory: Callable[[], DialogueEnv],
    q: QModel,
    config: DqnConfig,
    seed: int,
    mode: RewardMode,
    discriminator=None,
    eval_seed: int = 10_000,
    check_invariants: bool = False,
) -> tuple[QModel, list[CurveRecord]]:
    """Alternate episode collection and minibatch TD updates; greedy evaluation each epoch.

    With ``check_invariants`` the buffer bound and target staleness are
    asserted after every update.
    """
    mode = RewardMode(mode)
    root = np.random.SeedSequence([seed, 11])
    act_seq, update_seq = root.spawn(2)
    update_rng = np.random.default_rng(update_seq)
    env = env_factory()
    target = q.copy()
    buffer = ReplayBuffer(config.capacity, q.mlp.n_inputs)
    opt = Adam(config.learning_rate)
    sync = TargetSync(config.target_period)
    eval_seeds = np.random.SeedSequence(eval_seed).spawn(config.eval_sessions)
    curve = []
    for epoch, epoch_seq in enumerate(act_seq.spawn(config.epochs)):
        eps = epsilon_at(config, epoch)
        returns = []
        for ep_seq in epoch_seq.spawn(config.episodes_per_epoch):
            rng = np.random.default_rng(ep_seq)
            state, _ = env.reset(rng)
            done, total, steps = False, 0.0, 0
            while not done:
                state, done, r = collect_step(env, state, q, eps, discriminator, mode, buffer, rng)
                total += r
                steps += 1
            returns.append(total)
            for _ in range(config.updates_per_episode * steps):
                before = [a.copy() for a in target.mlp.arrays()] if check_invariants else None
                if dqn_update(buffer, q, target, config.gamma, config.batch_size, opt, update_rng) is None:
                    continue
                synced = sync(q, target)
                if check_invariants:
                    assert len(buffer) <= buffer.capacity
                    if synced:
                        assert all(np.array_equal(a, b) for a, b in zip(target.mlp.arrays(), q.mlp.arrays()))
                    else:
                        assert all(np.array_equal(a, b) for a, b in zip(target.mlp.arrays(), before))
        evals = play_episodes(env_factory, q.as_policy(), eval_seeds, greedy=True)
        curve.append(summarize(evals, epoch, mode.value, seed, "dqn", returns))
    return q, curve
