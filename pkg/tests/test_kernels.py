"""The compiled and fallback paths must agree bit for bit."""
import numpy as np
import pytest

from dicelab import kernels
from dicelab._accel import HAVE_NUMBA
from dicelab.mdp import behaviour_policy, make_env, sample_restart_stream, sample_trajectories

from conftest import random_mdp, random_policy

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def test_cdf_pads_last_outcome():
    cdf = kernels.categorical_cdf(np.array([[0.1, 0.2, 0.7, 0.0], [0.0, 1.0, 0.0, 0.0]]))
    assert cdf[0, 2] == 1.0 and cdf[0, 3] == 1.0
    assert cdf[1, 1] == 1.0
    assert np.all(np.diff(cdf, axis=1) >= 0)


@needs_numba
@pytest.mark.parametrize("spec", ["chain:5", "loop:8", "gridworld:4x4"])
@pytest.mark.parametrize("max_len", [1, 7, 100])
def test_trajectory_sampling_identical(spec, max_len):
    env = make_env(spec)
    mu = behaviour_policy(env.target, 0.3)
    a = sample_trajectories(env.mdp, mu, 11, 300, max_len, backend="numba")
    b = sample_trajectories(env.mdp, mu, 11, 300, max_len, backend="numpy")
    for x, y in zip(a, b):
        assert x.dtype == y.dtype
        assert np.array_equal(x, y)


@needs_numba
def test_sampling_capacity_retry_path():
    # Long episodes (rare termination) overflow the first capacity guess.
    mdp = random_mdp(4, 2, 3, stop=(0.001, 0.002))
    pi = random_policy(4, 2, 1)
    a = sample_trajectories(mdp, pi, 5, 50, 2000, backend="numba")
    b = sample_trajectories(mdp, pi, 5, 50, 2000, backend="numpy")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[1].max() > 100


@needs_numba
def test_restart_stream_identical():
    mdp = random_mdp(6, 3, 0)
    mu = random_policy(6, 3, 0)
    a = sample_restart_stream(mdp, mu, 9, 20_000, backend="numba")
    b = sample_restart_stream(mdp, mu, 9, 20_000, backend="numpy")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@needs_numba
def test_rho_prod_identical():
    rng = np.random.default_rng(0)
    lengths = rng.integers(1, 30, 200)
    time = np.concatenate([np.arange(n) for n in lengths])
    rho = rng.uniform(0, 2, time.size)
    a = kernels.rho_prod(time, rho, "numba")
    b = kernels.rho_prod(time, rho, "numpy")
    assert np.array_equal(a, b)
    assert np.all(a[time == 0] == 1.0)


@needs_numba
@pytest.mark.parametrize("constant", [False, True])
def test_linear_updates_identical(constant):
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((7, 3))
    states = rng.integers(0, 7, 5000)
    y = rng.uniform(0, 2, 5000)
    scales = rng.uniform(0.1, 1, 5000)
    out = []
    for fn in (kernels.linear_dice_updates, kernels.linear_dice_updates.py_func):
        theta = np.zeros(3)
        eta, bad = fn(theta, 0.0, feats, states, y, scales, 0.001, 0.5, 0.05, 0.75, constant, 3)
        out.append((theta, eta, bad))
    assert np.array_equal(out[0][0], out[1][0])
    assert out[0][1] == out[1][1] and out[0][2] == out[1][2] == -1


def test_linear_updates_flag_divergence():
    feats = np.array([[1e200]])
    theta = np.ones(1)
    with np.errstate(over="ignore", invalid="ignore"):
        _, bad = kernels.linear_dice_updates.py_func(
            theta, 0.0, feats, np.zeros(10, dtype=np.int64), np.ones(10), np.ones(10),
            0.0, 0.0, 1.0, 0.75, True, 0)
    assert bad == 0


@needs_numba
def test_td_sweeps_identical():
    env = make_env("gridworld:4x4")
    mu = behaviour_policy(env.target, 0.5)
    _, time, s, a, r, s2, _ = sample_trajectories(env.mdp, mu, 2, 200)
    order = np.random.default_rng(0).permutation(s.size)
    qs = []
    for fn in (kernels.td_sweep, kernels.td_sweep.py_func):
        q = np.zeros((16, 4))
        visits = np.zeros_like(q)
        fn(q, visits, order, s, a, r, s2, env.target.probs, 0.9, 0.5, 0.6)
        qs.append(q)
    assert np.array_equal(*qs)

    prev = np.where(time == 0, -1, np.roll(s, 1))
    prev_rho = np.where(time == 0, 0.0, 1.3)
    bonus = np.where(time == 0, 0.1, 0.0)
    ws = []
    for fn in (kernels.cop_td_sweep, kernels.cop_td_sweep.py_func):
        w = np.zeros(16)
        fn(w, np.zeros(16), order, s, prev, prev_rho, bonus, 0.9, 0.5, 0.6)
        ws.append(w)
    assert np.array_equal(*ws)
    assert (ws[0] >= 0).all()


def test_backend_selection_follows_flag(monkeypatch):
    from dicelab import _accel
    monkeypatch.setattr(_accel, "NUMBA_DISABLED", True)
    assert not _accel.use_numba()
    monkeypatch.setattr(kernels, "use_numba", _accel.use_numba)
    assert kernels.pick(kernels.td_sweep) is kernels.td_sweep.py_func


def test_env_flag_disables_numba():
    import subprocess
    import sys
    code = "from dicelab import _accel; print(_accel.use_numba())"
    env = {**__import__("os").environ, "DICELAB_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "False"
