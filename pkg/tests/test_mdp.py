import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicelab.errors import InputError
from dicelab.mdp import (
    BUILTIN_ENVS, TERMINAL, Policy, TabularMdp, behaviour_policy, build_chain, make_env,
    mix_policy, sample_restart_stream, sample_trajectories, sample_trajectory, save_env,
    temper_policy, uniform_policy,
)
from dicelab.oracle import expected_quantities, undiscounted_stationary

from conftest import one_state, random_mdp, random_policy


def test_build_chain_terminating_single_state():
    c = build_chain(one_state(term=1.0), Policy([[1.0]]))
    assert c.p_pi.tolist() == [[0.0]]
    assert c.term_prob.tolist() == [1.0]
    assert c.restart_chain.tolist() == [[1.0]]


def test_build_chain_loop_or_stop():
    mdp = TabularMdp([[[1.0], [0.0]]], [[0.0, 1.0]], [[0.0, 0.0]], [1.0])
    c = build_chain(mdp, uniform_policy(1, 2))
    assert c.p_pi.tolist() == [[0.5]]
    assert c.term_prob.tolist() == [0.5]


def test_build_chain_matches_loop_sum():
    mdp = random_mdp(3, 2, 4)
    pi = random_policy(3, 2, 4)
    c = build_chain(mdp, pi)
    for s in range(3):
        for t in range(3):
            want = sum(pi.probs[s, a] * mdp.transition[s, a, t] for a in range(2))
            assert c.p_pi[s, t] == pytest.approx(want, abs=1e-15)
        assert c.term_prob[s] == pytest.approx(
            sum(pi.probs[s, a] * mdp.termination[s, a] for a in range(2)), abs=1e-15)


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_restart_chain_row_stochastic(S, A, seed):
    c = build_chain(random_mdp(S, A, seed), random_policy(S, A, seed + 1))
    assert np.allclose(c.restart_chain.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(c.p_pi.sum(axis=1) + c.term_prob, 1.0, atol=1e-12)


@pytest.mark.parametrize("kwargs, match", [
    (dict(transition=[[[0.5]]], termination=[[0.4]]), "sums to"),
    (dict(transition=[[[1.2]]], termination=[[-0.2]]), "nonnegative"),
    (dict(initial_dist=[0.9]), "initial_dist"),
    (dict(discount=1.0), "discount"),
    (dict(discount=0.0), "discount"),
    (dict(reward=[[np.nan]]), "finite"),
    (dict(termination=[[0.0, 1.0]]), "termination"),
])
def test_mdp_validation(kwargs, match):
    base = dict(transition=[[[0.5]]], termination=[[0.5]], reward=[[1.0]],
                initial_dist=[1.0], discount=0.9)
    with pytest.raises(InputError, match=match):
        TabularMdp(**{**base, **kwargs})


def test_policy_validation_and_shape_check():
    with pytest.raises(InputError):
        Policy([[0.5, 0.6]])
    with pytest.raises(InputError):
        Policy([[1.5, -0.5]])
    with pytest.raises(InputError, match="does not match"):
        build_chain(one_state(), uniform_policy(2, 1))


def test_policy_helpers():
    base = Policy([[0.9, 0.1], [0.2, 0.8]])
    assert np.allclose(mix_policy(base, 0.0).probs, base.probs)
    assert np.allclose(mix_policy(base, 1.0).probs, 0.5)
    assert np.allclose(mix_policy(base, 0.3).probs[0], [0.78, 0.22])
    assert np.allclose(temper_policy(base, 1.0).probs, base.probs)
    flat = temper_policy(base, 2.0).probs
    assert flat[0, 0] < 0.9 and flat[0, 0] > 0.5
    assert np.allclose(behaviour_policy(base, 0.3, 1.0).probs, mix_policy(base, 0.3).probs)
    with pytest.raises(InputError):
        mix_policy(base, 1.5)


def test_one_step_episode():
    traj = sample_trajectory(one_state(term=1.0), Policy([[1.0]]), 0, max_len=5)
    assert len(traj) == 1 and traj.terminated
    assert traj.steps() == [(0, 0, 1.0, TERMINAL)]


def test_self_loop_truncates():
    traj = sample_trajectory(one_state(term=0.0), Policy([[1.0]]), 0, max_len=10)
    assert len(traj) == 10 and not traj.terminated
    assert traj.next_states[-1] == 0


def test_max_len_validated():
    with pytest.raises(InputError):
        sample_trajectory(one_state(), Policy([[1.0]]), 0, max_len=0)


def test_same_seed_same_bits_and_index_stability():
    env = make_env("loop:8")
    a = sample_trajectories(env.mdp, env.target, 3, 50)
    b = sample_trajectories(env.mdp, env.target, 3, 50)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    # trajectory 7 is the same whether sampled in a batch of 50 or alone
    t7 = sample_trajectory(env.mdp, env.target, 3, index=7)
    mask = a[0] == 7
    assert np.array_equal(a[2][mask], t7.states)
    assert np.array_equal(a[5][mask], t7.next_states)


def test_chain_mean_length_matches_oracle(chain5):
    env, mu = chain5
    _, time, *_ , term = sample_trajectories(env.mdp, mu, 0, 100_000, max_len=10_000)
    assert term.all()
    lengths = np.bincount(np.searchsorted(np.flatnonzero(time == 0), np.arange(time.size),
                                          side="right") - 1)
    want, _ = expected_quantities(env.mdp, mu, 0.95)
    se = lengths.std(ddof=1) / np.sqrt(lengths.size)
    assert abs(lengths.mean() - want) < 3 * se


def test_restart_frequencies_converge():
    mdp = random_mdp(6, 2, 12)
    mu = random_policy(6, 2, 3)
    states, *_ = sample_restart_stream(mdp, mu, 1, 1_000_000)
    freq = np.bincount(states, minlength=6) / states.size
    assert np.abs(freq - undiscounted_stationary(mdp, mu)).max() <= 0.01


def test_transition_frequencies():
    env = make_env("chain:5")
    _, _, s, a, _, s2, _ = sample_trajectories(env.mdp, uniform_policy(5, 2), 4, 20_000)
    pick = (s == 2) & (a == 0)
    frac_stay = np.mean(s2[pick] == 2)
    assert abs(frac_stay - 0.1) < 0.01


@pytest.mark.parametrize("spec", BUILTIN_ENVS)
def test_builtin_envs_deterministic(spec):
    a, b = make_env(spec), make_env(spec)
    assert np.array_equal(a.mdp.transition, b.mdp.transition)
    assert np.array_equal(a.target.probs, b.target.probs)
    assert (a.mdp.reward == a.mdp.reward[:, :1]).all()  # state-only rewards


def test_make_env_gamma_and_errors(tmp_path):
    assert make_env("chain:7", 0.8).mdp.discount == 0.8
    assert make_env("gridworld:3x2").mdp.num_states == 6
    for bad in ("chain:1", "ring:4", "gridworld:3", "chain:x"):
        with pytest.raises(InputError):
            make_env(bad)
    with pytest.raises(InputError):
        make_env(str(tmp_path / "missing.json"))


def test_env_file_roundtrip(tmp_path):
    env = make_env("loop:8")
    path = tmp_path / "env.json"
    save_env(env, path)
    doc = json.loads(path.read_text())
    assert set(doc) >= {"num_states", "num_actions", "transition", "termination", "reward",
                        "initial_dist", "discount"}
    back = make_env(str(path))
    assert np.array_equal(back.mdp.transition, env.mdp.transition)
    assert np.array_equal(back.target.probs, env.target.probs)
    del doc["target_policy"]
    path.write_text(json.dumps(doc))
    assert np.allclose(make_env(str(path)).target.probs, 0.5)
    doc["num_states"] = 3
    path.write_text(json.dumps(doc))
    with pytest.raises(InputError):
        make_env(str(path))
