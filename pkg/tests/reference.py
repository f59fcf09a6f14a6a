"""Solve-free reference computations used to freeze oracle values.

Everything here iterates (series sums, power iteration, value iteration) so it
shares no code path with the dense solves in ``dicelab.oracle``.
"""
import numpy as np


def chain_parts(mdp, policy):
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    term = np.einsum("sa,sa->s", policy.probs, mdp.termination)
    return p_pi, term


def discounted_series(mdp, policy, gamma, terms=2000):
    p_pi, _ = chain_parts(mdp, policy)
    x = mdp.initial_dist.copy()
    total = np.zeros_like(x)
    w = 1.0
    for _ in range(terms):
        total += w * x
        x = x @ p_pi
        w *= gamma
    return (1.0 - gamma) * total


def stationary_power(mdp, policy, iters=200_000, tol=1e-15):
    p_pi, term = chain_parts(mdp, policy)
    R = p_pi + np.outer(term, mdp.initial_dist)
    R = 0.5 * (np.eye(len(R)) + R)  # lazy chain: same stationary law, aperiodic
    d = np.full(len(R), 1.0 / len(R))
    for _ in range(iters):
        nxt = d @ R
        if np.abs(nxt - d).max() < tol:
            return nxt
        d = nxt
    return d


def expected_length(mdp, policy, iters=200_000):
    """sum_j P(T > j) by propagating the surviving mass."""
    p_pi, _ = chain_parts(mdp, policy)
    x = mdp.initial_dist.copy()
    total = 0.0
    for _ in range(iters):
        m = x.sum()
        if m < 1e-17:
            break
        total += m
        x = x @ p_pi
    return total


def gamma_mass(mdp, policy, gamma, terms=4000):
    p_pi, term = chain_parts(mdp, policy)
    x = mdp.initial_dist.copy()
    total = 0.0
    w = gamma
    for _ in range(terms):
        total += w * (x @ term)
        x = x @ p_pi
        w *= gamma
    return total


def q_iteration(mdp, policy, gamma, iters=20_000):
    q = np.zeros_like(mdp.reward)
    for _ in range(iters):
        v = np.einsum("sa,sa->s", policy.probs, q)
        q = mdp.reward + gamma * mdp.transition @ v
    return q


def fenchel_grid_search(f_values, scale, lambda2, lo=-1000, hi=1000, points=41, tol=1e-13):
    """Maximise lambda2 * (mean(eta * scale * f - eta) - eta^2 / 2) over eta by zooming grids.

    The objective is evaluated in exact rational arithmetic: near its peak a
    quadratic moves by ~eta_err^2, below double rounding once eta_err < 1e-8,
    so a float-valued grid could not resolve the maximiser to 1e-9.
    Returns ``(argmax, max)`` as floats.
    """
    from fractions import Fraction

    n = len(f_values)
    mean_sf = sum(Fraction(scale) * Fraction(float(v)) for v in f_values) / n
    lam = Fraction(lambda2)

    def objective(eta):
        return lam * (eta * mean_sf - eta - eta * eta / 2)

    lo, hi = Fraction(lo), Fraction(hi)
    while True:
        step = (hi - lo) / (points - 1)
        grid = [lo + k * step for k in range(points)]
        vals = [objective(e) for e in grid]
        i = max(range(points), key=vals.__getitem__)
        if step < tol:
            return float(grid[i]), float(vals[i])
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, points - 1)]
