"""State feature tables for the linear estimators."""
import re

import numpy as np

from dicelab.errors import InputError


def onehot(num_states):
    return np.eye(num_states)


def random_features(num_states, dim, seed=0, weights=None):
    """Gaussian [S][dim] features; with ``weights``, columns are whitened so Phi^T W Phi = I.

    Whitening keeps the random draw but fixes its conditioning under the
    state weighting, which is what sets the convergence speed of the linear
    updates.
    """
    if not 1 <= dim <= num_states:
        raise InputError(f"feature dimension must lie in [1, {num_states}], got {dim}")
    Z = np.random.default_rng(seed).standard_normal((num_states, dim))
    if weights is None:
        return Z
    w = np.asarray(weights, dtype=float)
    C = (Z.T * w) @ Z
    evals, V = np.linalg.eigh(C)
    if evals.min() <= 1e-12 * max(evals.max(), 1.0):
        raise InputError("random features are degenerate under the given weights")
    return Z @ (V * evals ** -0.5) @ V.T


def parse_features(spec, num_states, seed=0, weights=None):
    """``onehot`` or ``random:d``."""
    if spec == "onehot":
        return onehot(num_states)
    if m := re.fullmatch(r"random:(\d+)", spec):
        return random_features(num_states, int(m[1]), seed, weights)
    raise InputError(f"unknown feature spec {spec!r}")
