"""End-to-end acceptance checks.

Each test prints one ``ACCEPT <n> PASS|FAIL`` line with the measured values
and wall time, then asserts the criterion at its stated tolerance.
"""

import functools
import time

import numpy as np
import pytest

from helpers import fd_grad, max_rel_err
from nap_rl.acts import DialogAct
from nap_rl.cli import main
from nap_rl.discriminator import DiscriminatorConfig, build_pair_dataset, evaluate_accuracy, train_discriminator
from nap_rl.dqn import (
    BRANCH_BOTH, BRANCH_CLASSIFIER, BRANCH_HUMAN, DqnConfig, QModel, branch_reward, td_loss, train_dqn,
)
from nap_rl.env import DialogueEnv
from nap_rl.evaluation import ExpertAgent, GreedyPolicyAgent, RandomAgent, run_evaluation, success, transcript_recall, match
from nap_rl.expert import generate_demonstrations
from nap_rl.nn import Mlp
from nap_rl.policy import ActionSpace, MleConfig, PolicyModel, ValueModel, cross_entropy_grad, demonstration_dataset, mle_pretrain
from nap_rl.ppo import PpoConfig, clipped_surrogate, compute_gae, ppo_loss, train
from nap_rl.reward import RewardMode, local_reward, shape

TREND_SEEDS = (0, 1, 2, 3, 4)
EVAL_SESSIONS = 500


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail, seconds):
        with capsys.disabled():
            print(f"\nACCEPT {n} {'PASS' if ok else 'FAIL'}: {detail} [{seconds:.1f}s]")
    return emit


@pytest.fixture(scope="module")
def corpus(env_factory):
    return generate_demonstrations(env_factory(), 2000, 0)


@pytest.fixture(scope="module")
def trained_discriminator(corpus, env_factory):
    t0 = time.time()
    splits = build_pair_dataset(corpus, np.random.default_rng(1))
    vocab = env_factory().vocab
    model, _ = train_discriminator(splits, vocab, DiscriminatorConfig(), np.random.default_rng(2))
    acc = evaluate_accuracy(model, splits.test)
    control, _ = train_discriminator(splits, vocab, DiscriminatorConfig(), np.random.default_rng(3), shuffle_labels=True)
    control_acc = evaluate_accuracy(control, splits.test)
    return model, acc, control_acc, time.time() - t0


def _jitter_biases(mlp, rng):
    # zero biases behind a fully dead relu layer put the next preactivation exactly on the kink
    for b in mlp.biases:
        b += rng.normal(scale=0.5, size=b.shape)
    return mlp


def test_1_gradient_checks(say):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = {"forward": 0.0, "mle": 0.0, "ppo": 0.0, "td": 0.0}
    n_configs = 100
    for _ in range(n_configs):
        n_in, n_out, batch = rng.integers(2, 6), rng.integers(2, 5), rng.integers(1, 6)
        hidden = tuple(rng.integers(2, 7, size=rng.integers(1, 3)))
        act = ["tanh", "relu"][rng.integers(2)]
        x = rng.normal(size=(batch, n_in))

        head = ["identity", "sigmoid", "softmax"][rng.integers(3)]
        mlp = _jitter_biases(Mlp.create([n_in, *hidden, n_out], rng, act, head), rng)
        g = rng.normal(size=(batch, n_out))
        _, cache = mlp.forward(x)
        worst["forward"] = max(worst["forward"], max_rel_err(
            mlp.backward(cache, g).arrays(), fd_grad(lambda: float((mlp(x) * g).sum()), mlp.arrays())))

        pm = Mlp.create([n_in, *hidden, n_out], rng, "tanh", "softmax")
        y = rng.integers(0, n_out, size=batch)
        _, grads = cross_entropy_grad(pm, x, y)
        worst["mle"] = max(worst["mle"], max_rel_err(
            grads.arrays(), fd_grad(lambda: cross_entropy_grad(pm, x, y)[0], pm.arrays())))

        space = ActionSpace([(DialogAct.make("hotel", "request", f"s{k}"),) for k in range(n_out)])
        policy = PolicyModel(pm, space)
        value = ValueModel(Mlp.create([n_in, *hidden, 1], rng, "tanh", "identity"))
        logp = np.log(policy.distribution(x)[np.arange(batch), y])
        # ratios of exp(+-0.05) and exp(+-0.5) sit strictly inside or outside the 0.2 band
        old = logp + rng.choice([-0.5, -0.05, 0.05, 0.5], size=batch)
        adv, ret = rng.normal(size=batch), rng.normal(size=batch)
        cfg = PpoConfig(c2=0.05)
        _, pg, vg, _ = ppo_loss(x, y, old, adv, ret, policy, value, cfg)
        f = lambda: ppo_loss(x, y, old, adv, ret, policy, value, cfg)[0]
        worst["ppo"] = max(worst["ppo"], max_rel_err(pg.arrays(), fd_grad(f, pm.arrays())),
                           max_rel_err(vg.arrays(), fd_grad(f, value.mlp.arrays())))

        q = QModel(_jitter_biases(Mlp.create([n_in, *hidden, n_out], rng, act, "identity"), rng), space)
        target = q.copy()
        target.mlp.weights[0] += rng.normal(scale=0.1, size=target.mlp.weights[0].shape)
        s2, r, d = rng.normal(size=(batch, n_in)), rng.normal(size=batch), rng.random(batch) < 0.3
        _, tg, _ = td_loss(q, target, x, y, r, s2, d, 0.99)
        worst["td"] = max(worst["td"], max_rel_err(
            tg.arrays(), fd_grad(lambda: td_loss(q, target, x, y, r, s2, d, 0.99)[0], q.mlp.arrays())))
    dt = time.time() - t0
    ok = max(worst.values()) < 1e-4 and dt < 30
    say(1, ok, f"{n_configs} configs, max rel err " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()), dt)
    assert ok


def _double_sum(r, v, nv, done, gamma, lam):
    n = len(r)
    out = np.zeros(n)
    for t in range(n):
        for l in range(n - t):
            k = t + l
            delta = r[k] + gamma * (0.0 if done[k] else nv[k]) - v[k]
            out[t] += (gamma * lam) ** l * delta
    return out


def test_2_gae_matches_double_sum(say):
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        r, v = rng.normal(scale=10, size=n), rng.normal(size=n)
        done = np.zeros(n, dtype=bool)
        done[-1] = True
        nv = np.append(v[1:], 0.0)
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, _ = compute_gae(r, v, nv, done, gamma, lam)
        worst = max(worst, float(np.max(np.abs(adv - _double_sum(r, v, nv, done, gamma, lam)))))
    dt = time.time() - t0
    ok = worst <= 1e-10 and dt < 10
    say(2, ok, f"1000 episodes, max |gae - double sum| {worst:.2e}", dt)
    assert ok


def test_3_clip_matches_piecewise(say):
    t0 = time.time()
    eps = 0.2
    ratios = [0.0, 0.5, 1.0 - eps, 0.9, 1.0, 1.1, 1.0 + eps, 1.5, 3.0]
    mismatches = 0
    for a in [-3.0, -1.0, 0.0, 0.5, 2.0]:
        for rho in ratios:
            hand = min(rho, 1 + eps) * a if a >= 0 else max(rho, 1 - eps) * a
            got = clipped_surrogate(np.array([rho]), np.array([a]), eps)[0]
            mismatches += got != hand
    dt = time.time() - t0
    ok = mismatches == 0
    say(3, ok, f"{len(ratios) * 5} (ratio, advantage) cases incl. 1+-eps, {mismatches} mismatches", dt)
    assert ok


def test_4_reward_algebra(say):
    t0 = time.time()
    endpoints = (local_reward(0.0), local_reward(0.5), local_reward(1.0)) == (-1.0, 0.0, 1.0)
    rng = np.random.default_rng(0)
    comb_ok = branch_ok = True
    for _ in range(1000):
        g = float(rng.choice([-1.0, 40.0, -40.0]))
        s = float(rng.random())
        comb_ok &= shape(g, s, RewardMode.COMBINED) == g + local_reward(s)
        branch_ok &= (branch_reward(g, s, BRANCH_HUMAN) == shape(g, s, RewardMode.GLOBAL)
                      and branch_reward(g, s, BRANCH_CLASSIFIER) == shape(g, s, RewardMode.LOCAL)
                      and branch_reward(g, s, BRANCH_BOTH) == shape(g, s, RewardMode.COMBINED))
    dt = time.time() - t0
    ok = endpoints and comb_ok and branch_ok
    say(4, ok, f"endpoints {endpoints}, comb = global + local {comb_ok}, branches = shape {branch_ok}", dt)
    assert ok


def test_5_discriminator_accuracy_and_control(say, trained_discriminator):
    _, acc, control, dt = trained_discriminator
    ok = acc >= 0.95 and abs(control - 0.5) <= 0.05 and dt < 120
    say(5, ok, f"held-out accuracy {acc:.4f} (>= 0.95), shuffled-label control {control:.4f} (0.5 +- 0.05)", dt)
    assert ok


def test_6_expert_sessions(say, env_factory, bundled):
    t0 = time.time()
    _, db = bundled
    report, records = run_evaluation(ExpertAgent(), env_factory, EVAL_SESSIONS, seed=6, with_reference=False)
    max_turns = max(r.n_turns for r in records)
    disagree = 0
    for r in records:
        closed = r.closing == ["[general][bye]{}"]
        derived = closed and transcript_recall(r.goal, r.turns) == 1.0 and match(r, db)
        disagree += derived != (r.outcome == "success")
        disagree += derived != success(r, db)
    dt = time.time() - t0
    ok = report.success_rate == 1.0 and report.match_rate == 1.0 and max_turns <= 20 and disagree == 0 and dt < 60
    say(6, ok, f"success {report.success_rate:.3f}, match {report.match_rate:.3f}, max turns {max_turns}, "
               f"{disagree} transcript disagreements", dt)
    assert ok


@pytest.fixture(scope="module")
def trend(corpus, env_factory, trained_discriminator):
    t0 = time.time()
    env = env_factory()
    action_space = ActionSpace.from_sessions(corpus)
    x, y, groups = demonstration_dataset(corpus, env, action_space)
    disc = trained_discriminator[0]
    cfg = PpoConfig(trajectories_per_epoch=64, max_epochs=60)
    results = {"mle": [], "global": [], "comb": []}
    for seed in TREND_SEEDS:
        base, _ = mle_pretrain(x, y, groups, action_space, MleConfig(epochs=10), np.random.default_rng([seed, 1]))
        rep, _ = run_evaluation(GreedyPolicyAgent.from_policy(base), env_factory, EVAL_SESSIONS, 555,
                                with_reference=False)
        results["mle"].append(rep.success_rate)
        for mode in ("global", "comb"):
            policy = base.copy()
            train(env_factory, policy, cfg, seed, RewardMode(mode), disc)
            rep, _ = run_evaluation(GreedyPolicyAgent.from_policy(policy), env_factory, EVAL_SESSIONS, 555,
                                    with_reference=False)
            results[mode].append(rep.success_rate)
    return {k: np.array(v) for k, v in results.items()}, time.time() - t0


def test_7_reward_trend(say, trend):
    res, dt = trend
    m = {k: float(v.mean()) for k, v in res.items()}
    wins = int((res["comb"] >= res["global"]).sum())
    a = m["comb"] >= m["global"] and wins >= 4
    b = m["global"] > m["mle"]
    c = m["comb"] >= m["mle"] + 0.10
    ok = a and b and c and dt < 1800
    per_seed = " ".join(f"{k}={np.round(v, 3).tolist()}" for k, v in res.items())
    say(7, ok, f"mean success mle {m['mle']:.3f}, global {m['global']:.3f}, comb {m['comb']:.3f}; "
               f"comb>=global in {wins}/5 seeds; (a) {a} (b) {b} (c) {c}; {per_seed}", dt)
    assert ok


def test_8_variance_soft_check(say, trend):
    res, _ = trend
    sd_comb, sd_global = float(res["comb"].std()), float(res["global"].std())
    ok = sd_comb <= sd_global
    # soft criterion: reported, never fails the suite
    say(8, ok, f"std of final success comb {sd_comb:.4f} vs global {sd_global:.4f}"
               + ("" if ok else " (FLAGGED: comb spread exceeds global)"), 0.0)


def test_9_dqn_beats_random(say, bundled, corpus):
    t0 = time.time()
    ontology, db = bundled
    factory = functools.partial(DialogueEnv, ontology, db, goal_domains=("restaurant",))
    # the action space is the full multi-domain one, so random play is not trivially successful
    action_space = ActionSpace.from_sessions(corpus)
    q = QModel.create(factory().feature_size, action_space, np.random.default_rng(0))
    # check_invariants asserts buffer bound and target staleness/sync after every update
    q, curve = train_dqn(factory, q, DqnConfig(epochs=30), 0, RewardMode.GLOBAL, check_invariants=True)
    dqn, _ = run_evaluation(GreedyPolicyAgent(q.mlp, action_space), factory, EVAL_SESSIONS, 999, with_reference=False)
    rand, _ = run_evaluation(RandomAgent(action_space), factory, EVAL_SESSIONS, 999, with_reference=False)
    dt = time.time() - t0
    gap = dqn.success_rate - rand.success_rate
    ok = gap >= 0.20 and dt < 600
    say(9, ok, f"single-domain success dqn {dqn.success_rate:.3f} vs uniform random {rand.success_rate:.3f} "
               f"(gap {gap:+.3f}); buffer/target invariants held", dt)
    assert ok


def test_10_metric_files_byte_identical(say, tmp_path):
    t0 = time.time()
    names = ["policy.json", "curve.csv", "metrics.json", "metrics.md", "per_domain_f1.csv", "sessions.jsonl"]

    def pipeline(root, workers):
        demos = root / "demos.jsonl"
        run = root / "run"
        w = ["--workers", str(workers)]
        assert main(["gen-demos", "--n", "200", "--seed", "3", "--out", str(demos), *w]) == 0
        assert main(["train-discriminator", "--corpus", str(demos), "--out", str(root / "d.json"),
                     "--floor", "0", *w]) == 0
        assert main(["train-policy", "--algo", "ppo", "--reward", "comb", "--corpus", str(demos),
                     "--discriminator", str(root / "d.json"), "--epochs", "3", "--trajectories", "16",
                     "--mle-epochs", "3", "--out-dir", str(run), *w]) == 0
        assert main(["evaluate", "--policy", str(run / "policy.json"), "--n", "50", "--out-dir", str(run), *w]) == 0
        return {n: (run / n).read_bytes() for n in names} | {"demos.jsonl": demos.read_bytes(),
                                                                "d.json": (root / "d.json").read_bytes()}

    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = pipeline(tmp_path / "a", 1), pipeline(tmp_path / "b", 2)
    differing = [n for n in a if a[n] != b[n]]
    dt = time.time() - t0
    ok = not differing
    say(10, ok, f"{len(a)} files compared across runs with 1 vs 2 workers, differing: {differing or 'none'}", dt)
    assert ok
