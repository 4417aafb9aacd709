import functools

import numpy as np
import pytest

from nap_rl.env import DialogueEnv
from nap_rl.expert import generate_demonstrations
from nap_rl.ontology import load_ontology
from nap_rl.policy import ActionSpace


@pytest.fixture(scope="session")
def bundled():
    return load_ontology()


@pytest.fixture(scope="session")
def env_factory(bundled):
    ontology, db = bundled
    return functools.partial(DialogueEnv, ontology, db)


@pytest.fixture(scope="session")
def demos(env_factory):
    return generate_demonstrations(env_factory(), 300, 0)


@pytest.fixture(scope="session")
def action_space(demos):
    return ActionSpace.from_sessions(demos)
