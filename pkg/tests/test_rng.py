import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicelab import rng


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**40))
@settings(max_examples=200, deadline=None)
def test_scalar_and_array_keys_agree(seed, stream):
    k = rng.stream_key(np.uint64(seed), np.uint64(stream))
    assert k == rng.stream_key_array(seed, np.array([stream], dtype=np.uint64))[0]


@given(st.integers(0, 2**64 - 1), st.integers(0, 10**6))
@settings(max_examples=200, deadline=None)
def test_uniform_in_unit_interval_and_matches_array(key, counter):
    u = rng.uniform(np.uint64(key), np.uint64(counter))
    assert 0.0 <= u < 1.0
    arr = rng.uniform_array(np.array([key], dtype=np.uint64), np.array([counter], dtype=np.uint64))
    assert u == arr[0]


def test_uniform_stream_looks_uniform():
    keys = rng.stream_key_array(7, np.zeros(200_000, dtype=np.uint64))
    u = rng.uniform_array(keys, np.arange(200_000, dtype=np.uint64))
    hist, _ = np.histogram(u, bins=20, range=(0, 1))
    expected = u.size / 20
    chi2 = ((hist - expected) ** 2 / expected).sum()
    assert chi2 < 45  # 19 dof, p ~ 1e-3
    assert abs(u.mean() - 0.5) < 0.005


def test_distinct_streams_differ():
    keys = rng.stream_key_array(1, np.arange(1000))
    assert np.unique(keys).size == 1000


@pytest.mark.parametrize("bad", [-1, 2**64, 1.5, "3"])
def test_seed_range(bad):
    with pytest.raises(ValueError):
        rng.as_seed(bad)
