import numpy as np
import pytest

from helpers import fd_grad, max_rel_err
from nap_rl.acts import DialogAct
from nap_rl.errors import InvalidInputError
from nap_rl.nn import Mlp
from nap_rl.policy import (
    ActionSpace, MleConfig, PolicyModel, ValueModel, accuracy, cross_entropy_grad, demonstration_dataset,
    greedy_action, mle_pretrain, policy_distribution, sample_action, value_estimate,
)

SPACE = ActionSpace([(DialogAct.make("hotel", "request", "area"),), (DialogAct.make("hotel", "offer", "name"),),
                     (DialogAct.make("taxi", "request", "car"),), ()])


def test_zero_model_is_uniform():
    model = PolicyModel(Mlp.zeros([5, 3, 4], "tanh", "softmax"), SPACE)
    assert np.array_equal(policy_distribution(model, np.ones(5)), np.full(4, 0.25))


def test_distribution_matches_exp_normalize_and_is_shift_invariant():
    rng = np.random.default_rng(0)
    model = PolicyModel.create(6, SPACE, rng, hidden=(8,))
    x = rng.normal(size=6)
    z = model.mlp.logits(x)
    ref = np.exp(z) / np.exp(z).sum()
    assert np.allclose(policy_distribution(model, x), ref, rtol=0, atol=1e-15)
    model.mlp.biases[-1] += 123.0
    assert np.allclose(policy_distribution(model, x), ref, rtol=0, atol=1e-12)


def test_sampling_frequencies():
    rng = np.random.default_rng(1)
    p = np.full(4, 0.25)
    counts = np.bincount([sample_action(p, rng) for _ in range(100_000)], minlength=4) / 100_000
    assert np.all(np.abs(counts - 0.25) < 0.01)


def test_greedy_takes_lowest_index_tie():
    assert greedy_action(np.array([0.1, 0.4, 0.4, 0.1])) == 1


def test_action_space_lookup_and_unseen_act():
    assert SPACE.lookup((DialogAct.make("hotel", "offer", name="Some Inn"),)) == 1
    with pytest.raises(InvalidInputError, match=r"\[taxi\]\[offer\]\{name\}"):
        SPACE.lookup((DialogAct.make("taxi", "offer", "name"),))
    back = ActionSpace.from_list(SPACE.to_list())
    assert back.actions == SPACE.actions


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    mlp = Mlp.create([5, 7, 4], rng, "tanh", "softmax")
    x, y = rng.normal(size=(10, 5)), rng.integers(0, 4, size=10)
    loss, grads = cross_entropy_grad(mlp, x, y)
    assert loss == pytest.approx(-np.mean(np.log(mlp(x)[np.arange(10), y])), rel=1e-12)
    assert max_rel_err(grads.arrays(), fd_grad(lambda: cross_entropy_grad(mlp, x, y)[0], mlp.arrays())) < 1e-4


def test_single_example_is_memorized():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6))
    y = np.array([2])
    model, hist = mle_pretrain(x, y, np.zeros(1), SPACE, MleConfig(learning_rate=1e-2, epochs=200), rng)
    assert policy_distribution(model, x[0])[2] >= 0.99
    with pytest.raises(InvalidInputError):
        mle_pretrain(np.zeros((0, 6)), np.zeros(0, int), np.zeros(0), SPACE, MleConfig(), rng)


def test_value_estimate_shapes():
    rng = np.random.default_rng(4)
    value = ValueModel.create(5, rng, hidden=(4,))
    x = rng.normal(size=(3, 5))
    batch = value_estimate(value, x)
    assert batch.shape == (3,) and value_estimate(value, x[1]) == pytest.approx(batch[1], abs=1e-12)


@pytest.fixture(scope="module")
def demo_data(env_factory, demos, action_space):
    return demonstration_dataset(demos, env_factory(), action_space)


def test_cloning_beats_chance_and_shuffled_pairing_does_not(demo_data, action_space):
    x, y, groups = demo_data
    cfg = MleConfig(epochs=8)
    model, hist = mle_pretrain(x, y, groups, action_space, cfg, np.random.default_rng(5))
    majority = np.bincount(y).max() / len(y)
    assert max(hist.validation_accuracy) > majority + 0.3
    # breaking the state/action pairing leaves only the label prior to learn
    y_shuffled = np.random.default_rng(6).permutation(y)
    _, hist2 = mle_pretrain(x, y_shuffled, groups, action_space, cfg, np.random.default_rng(5))
    assert max(hist2.validation_accuracy) < majority + 0.1


def test_checkpoint_round_trip(tmp_path, demo_data, action_space):
    x, _, _ = demo_data
    model = PolicyModel.create(x.shape[1], action_space, np.random.default_rng(7))
    model.save(tmp_path / "p.json")
    back = PolicyModel.load(tmp_path / "p.json")
    assert np.array_equal(back.distribution(x[:5]), model.distribution(x[:5]))
    assert back.action_space.actions == action_space.actions
    assert accuracy(back, x[:5], np.zeros(5, int)) == accuracy(model, x[:5], np.zeros(5, int))
