"""On-policy training: rollouts with shaped rewards, GAE, and clipped-surrogate updates."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .env import DialogueEnv, Outcome, global_reward, session_match
from .errors import InvalidInputError, NumericalError, UsageError
from .nn import Adam, Grads, log_softmax, softmax
from .policy import PolicyModel, ValueModel, sample_action
from .reward import RewardMode, shape

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    trajectories_per_epoch: int = 1024
    max_epochs: int = 200
    minibatch_size: int = 256
    update_epochs: int = 4
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    eval_sessions: int = 64
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise InvalidInputError("gamma must be in (0, 1] and lambda in [0, 1]")
        if self.clip <= 0 or self.c1 < 0 or self.c2 < 0:
            raise InvalidInputError("clip must be positive, c1/c2 non-negative")
        if min(self.trajectories_per_epoch, self.minibatch_size, self.update_epochs) < 1:
            raise InvalidInputError("batch settings must be positive")


@dataclass
class EpisodeRecord:
    features: list
    actions: list
    logps: list
    user_acts: list
    system_acts: list
    global_rewards: list
    outcome: str
    turns: int
    matched: bool


@dataclass
class RolloutBatch:
    features: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    rewards: np.ndarray
    global_rewards: np.ndarray
    local_scores: np.ndarray
    dones: np.ndarray
    episode: np.ndarray
    values: np.ndarray = None
    next_values: np.ndarray = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    episodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


def play_episode(env: DialogueEnv, policy: PolicyModel, rng: np.random.Generator, greedy: bool = False) -> EpisodeRecord:
    state, _ = env.reset(rng)
    rec = EpisodeRecord([], [], [], [], [], [], "", 0, False)
    done = False
    while not done:
        x = env.features(state)
        logits = policy.mlp.logits(x)
        p = softmax(logits)
        a = int(np.argmax(p)) if greedy else sample_action(p, rng)
        rec.features.append(x)
        rec.actions.append(a)
        rec.logps.append(float(log_softmax(logits)[a]))
        rec.user_acts.append(state.last_user_acts)
        state, done, info = env.step(policy.action_space[a])
        rec.system_acts.append(info["system_acts"])
        rec.global_rewards.append(global_reward(state))
    rec.outcome = state.outcome.value
    rec.turns = state.turn_index
    rec.matched = session_match(env.goal, state.offered, env.db)
    return rec


def _play_chunk(args):
    env_factory, policy, seeds, greedy = args
    env = env_factory()
    return [play_episode(env, policy, np.random.default_rng(s), greedy) for s in seeds]


def play_episodes(env_factory: Callable[[], DialogueEnv], policy: PolicyModel, seeds, greedy=False, workers=1):
    """Episodes in seed order; each seed is its own RNG stream, so ``workers`` cannot change results."""
    seeds = list(seeds)
    if workers <= 1 or len(seeds) < 2:
        return _play_chunk((env_factory, policy, seeds, greedy))
    chunks = [seeds[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_play_chunk, [(env_factory, policy, c, greedy) for c in chunks]))
    out = [None] * len(seeds)
    for i, part in enumerate(parts):
        out[i::workers] = part
    return out


def collect_trajectories(
    env_factory: Callable[[], DialogueEnv],
    policy: PolicyModel,
    value: Optional[ValueModel],
    discriminator,
    mode: RewardMode,
    n: int,
    seed_seq: np.random.SeedSequence,
    workers: int = 1,
) -> RolloutBatch:
    """``n`` complete episodes sampled from ``policy`` with rewards shaped per ``mode``.

    Local scores come from the frozen discriminator at collection time and
    are stored; updates never re-score.
    """
    mode = RewardMode(mode)
    if n < 1:
        raise InvalidInputError("need at least one episode")
    if mode is not RewardMode.GLOBAL and discriminator is None:
        raise UsageError(f"reward mode {mode.value!r} needs a trained discriminator")
    episodes = play_episodes(env_factory, policy, seed_seq.spawn(n), workers=workers)
    feats, acts, logps, grs, dones, ep_ids, pairs = [], [], [], [], [], [], []
    for k, ep in enumerate(episodes):
        t_last = len(ep.actions) - 1
        for t in range(len(ep.actions)):
            feats.append(ep.features[t])
            acts.append(ep.actions[t])
            logps.append(ep.logps[t])
            grs.append(ep.global_rewards[t])
            dones.append(t == t_last)
            ep_ids.append(k)
            pairs.append((ep.user_acts[t], ep.system_acts[t]))
    if discriminator is not None and mode is not RewardMode.GLOBAL:
        scores = discriminator.score_batch(pairs)
    else:
        scores = np.full(len(pairs), 0.5)
    rewards = np.array([shape(g, float(s), mode) for g, s in zip(grs, scores)])
    batch = RolloutBatch(
        features=np.array(feats),
        actions=np.array(acts, dtype=np.int64),
        old_logp=np.array(logps),
        rewards=rewards,
        global_rewards=np.array(grs),
        local_scores=np.asarray(scores, dtype=np.float64),
        dones=np.array(dones),
        episode=np.array(ep_ids),
        episodes=episodes,
    )
    if value is not None:
        attach_values(batch, value)
    return batch


def attach_values(batch: RolloutBatch, value: ValueModel) -> None:
    v = value.estimate(batch.features)
    nxt = np.zeros_like(v)
    nxt[:-1] = v[1:]
    nxt[batch.dones] = 0.0
    batch.values, batch.next_values = v, nxt


def compute_gae(rewards, values, next_values, dones, gamma: float, lam: float):
    """Advantages as discounted sums of TD residuals, cut at every episode end.

    Returns ``(advantages, return_targets)`` with targets = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    not_done = 1.0 - dones
    deltas = rewards + gamma * next_values * not_done - values
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = deltas[t] + gamma * lam * not_done[t] * running
        adv[t] = running
    return adv, adv + values


def clipped_surrogate(ratio, advantage, clip: float):
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage)


def ppo_loss(
    features: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    policy: PolicyModel,
    value: ValueModel,
    config: PpoConfig,
):
    """Negated clipped objective with value loss and entropy bonus.

    Returns ``(loss, policy_grads, value_grads, stats)``.
    """
    n = len(actions)
    idx = np.arange(n)
    logits, pcache = policy.mlp.forward(features, return_logits=True)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    ratio = np.exp(logp_all[idx, actions] - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise NumericalError("non-finite probability ratio")
    surr = clipped_surrogate(ratio, advantages, config.clip)
    entropy = -(p * logp_all).sum(axis=1)
    v, vcache = value.mlp.forward(features)
    v = v[:, 0]
    vf = (v - returns) ** 2
    loss = float(-surr.mean() + config.c1 * vf.mean() - config.c2 * entropy.mean())

    # gradient flows through the unclipped term wherever it attains the min
    active = ratio * advantages <= np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * advantages
    coef = -(advantages * ratio * active) / n
    g = -p * coef[:, None]
    g[idx, actions] += coef
    g += (config.c2 / n) * p * (logp_all + entropy[:, None])
    policy_grads = policy.mlp.backward(pcache, g, wrt_logits=True)
    value_grads = value.mlp.backward(vcache, (2.0 * config.c1 / n) * (v - returns)[:, None])
    stats = {
        "surrogate": float(surr.mean()),
        "value_loss": float(vf.mean()),
        "entropy": float(entropy.mean()),
        "clip_fraction": float((np.abs(ratio - 1.0) > config.clip).mean()),
    }
    return loss, policy_grads, value_grads, stats


@dataclass
class CurveRecord:
    epoch: int
    mode: str
    seed: int
    success_rate: float
    match_rate: float
    avg_turns_all: float
    avg_turns_success: float
    mean_return: float
    algo: str = "ppo"


def summarize(episodes, epoch: int, mode: str, seed: int, algo: str, returns=None) -> CurveRecord:
    succ = [e for e in episodes if e.outcome == Outcome.SUCCESS.value]
    turns_succ = float(np.mean([e.turns for e in succ])) if succ else float("nan")
    return CurveRecord(
        epoch=epoch,
        mode=mode,
        seed=seed,
        success_rate=len(succ) / len(episodes),
        match_rate=float(np.mean([e.matched for e in episodes])),
        avg_turns_all=float(np.mean([e.turns for e in episodes])),
        avg_turns_success=turns_succ,
        mean_return=float(np.mean(returns)) if returns is not None else float("nan"),
        algo=algo,
    )


def ppo_update(batch: RolloutBatch, policy: PolicyModel, value: ValueModel, config: PpoConfig,
               popt: Adam, vopt: Adam, rng: np.random.Generator) -> dict:
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    stats = {}
    for _ in range(config.update_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            loss, pg, vg, stats = ppo_loss(
                batch.features[idx], batch.actions[idx], batch.old_logp[idx],
                adv[idx], batch.returns[idx], policy, value, config,
            )
            if not np.isfinite(loss):
                raise NumericalError("PPO loss is not finite")
            popt.step(policy.mlp, pg)
            vopt.step(value.mlp, vg)
    return stats


def train(
    env_factory: Callable[[], DialogueEnv],
    policy: PolicyModel,
    config: PpoConfig,
    seed: int,
    mode: RewardMode,
    discriminator=None,
    value: Optional[ValueModel] = None,
    eval_seed: int = 10_000,
    progress: Optional[Callable[[CurveRecord], None]] = None,
) -> tuple[PolicyModel, ValueModel, list[CurveRecord]]:
    """Run PPO from ``policy`` (updated in place); one curve record per epoch.

    The curve reports greedy performance on a fixed set of evaluation goals.
    """
    mode = RewardMode(mode)
    root = np.random.SeedSequence([seed, 7])
    init_seq, update_seq, collect_seq = root.spawn(3)
    n_features = policy.mlp.n_inputs
    if value is None:
        value = ValueModel.create(n_features, np.random.default_rng(init_seq))
    update_rng = np.random.default_rng(update_seq)
    popt, vopt = Adam(config.policy_lr), Adam(config.value_lr)
    eval_seeds = np.random.SeedSequence(eval_seed).spawn(config.eval_sessions)
    curve = []
    for epoch, epoch_seq in enumerate(collect_seq.spawn(config.max_epochs)):
        batch = collect_trajectories(env_factory, policy, value, discriminator, mode,
                                     config.trajectories_per_epoch, epoch_seq, config.workers)
        batch.advantages, batch.returns = compute_gae(
            batch.rewards, batch.values, batch.next_values, batch.dones, config.gamma, config.lam)
        try:
            ppo_update(batch, policy, value, config, popt, vopt, update_rng)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from exc
        evals = play_episodes(env_factory, policy, eval_seeds, greedy=True, workers=config.workers)
        ep_returns = np.bincount(batch.episode, weights=batch.rewards)
        rec = summarize(evals, epoch, mode.value, seed, "ppo", ep_returns)
        curve.append(rec)
        if progress:
            progress(rec)
        log.debug("epoch %d %s", epoch, asdict(rec))
    return policy, value, curve
