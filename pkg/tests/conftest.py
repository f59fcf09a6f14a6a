import numpy as np
import pytest

from dicelab.mdp import Policy, TabularMdp


def one_state(term=1.0, reward=1.0, gamma=0.5):
    """Single state, single action; ends w.p. ``term`` and otherwise loops."""
    return TabularMdp([[[1.0 - term]]], [[term]], [[reward]], [1.0], gamma)


def random_mdp(num_states, num_actions, seed, stop=(0.05, 0.3), gamma=0.9):
    """Dense random MDP: every transition positive, termination in ``stop``."""
    rng = np.random.default_rng(seed)
    term = rng.uniform(*stop, size=(num_states, num_actions))
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    P *= (1.0 - term)[:, :, None]
    reward = rng.uniform(0, 1, size=num_states)[:, None].repeat(num_actions, axis=1)
    nu = rng.dirichlet(np.ones(num_states))
    return TabularMdp(P, term, reward, nu, gamma)


def random_policy(num_states, num_actions, seed, floor=0.05):
    p = np.random.default_rng(seed).dirichlet(np.ones(num_actions), size=num_states)
    p = floor / num_actions + (1 - floor) * p
    return Policy(p / p.sum(axis=1, keepdims=True))


@pytest.fixture
def chain5():
    from dicelab.mdp import behaviour_policy, make_env
    env = make_env("chain:5")
    return env, behaviour_policy(env.target, 0.3)
