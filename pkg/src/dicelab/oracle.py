"""Exact ground truth by dense linear algebra.

Conventions:

* ``d_pi_gamma`` is the discounted occupancy ``(1-g) sum_j g^j P(S_j = s)`` over
  non-terminal states. In an episodic task its mass is ``1 - E_pi[g^T]``.
* ``d_mu`` is the stationary law of the behaviour restart chain (termination
  jumps back to the initial distribution), over non-terminal states only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import breadth_first_order, connected_components

from dicelab.errors import InputError, ModelError, NumericalError
from dicelab.mdp import Policy, TabularMdp, build_chain

RANK_TOL = 1e-10
HURWITZ_TOL = 1e-12


def _gamma(mdp, gamma):
    g = mdp.discount if gamma is None else float(gamma)
    if not 0.0 < g < 1.0:
        raise InputError(f"discount must lie in (0, 1), got {g}")
    return g


def _reachable(adj, sources):
    seen = np.zeros(adj.shape[0], dtype=bool)
    for s in np.flatnonzero(sources):
        if not seen[s]:
            seen[breadth_first_order(adj, s, directed=True, return_predecessors=False)] = True
    return seen


def discounted_stationary(mdp: TabularMdp, policy: Policy, gamma=None) -> np.ndarray:
    g = _gamma(mdp, gamma)
    chain = build_chain(mdp, policy)
    A = np.eye(mdp.num_states) - g * chain.p_pi.T
    d = (1.0 - g) * linalg.solve(A, mdp.initial_dist)
    if not np.isfinite(d).all():
        raise NumericalError("discounted occupancy solve produced non-finite values")
    return np.maximum(d, 0.0)


def _restart_support(mdp, policy):
    """States reachable from the initial law in the restart chain, and its closed classes."""
    R = build_chain(mdp, policy).restart_chain
    adj = (R > 0).astype(np.int8)
    reach = _reachable(adj, mdp.initial_dist > 0)
    idx = np.flatnonzero(reach)
    sub = adj[np.ix_(idx, idx)]
    ncomp, labels = connected_components(sub, directed=True, connection="strong")
    closed = []
    for c in range(ncomp):
        members = labels == c
        if not sub[np.ix_(members, ~members)].any():
            closed.append(idx[members])
    closed.sort(key=lambda c: c[0])
    return R, idx, closed


def undiscounted_stationary(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    R, idx, closed = _restart_support(mdp, policy)
    if len(closed) > 1:
        names = "; ".join(str(c.tolist()) for c in closed)
        raise ModelError(f"restart chain is reducible: closed classes {names}")
    m = idx.size
    A = R[np.ix_(idx, idx)].T - np.eye(m)
    A[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    d_sub = linalg.solve(A, b)
    d = np.zeros(mdp.num_states)
    d[idx] = np.where(np.abs(d_sub) < 1e-15, 0.0, d_sub)
    if (d < 0).any() or not np.isfinite(d).all():
        raise NumericalError(f"stationary solve returned an invalid vector {d}")
    return d


def mean_recurrence_times(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """Expected return time to each state in the restart chain, by a hitting-time solve.

    ``inf`` for states outside the recurrent class. Independent of
    :func:`undiscounted_stationary`, which it cross-checks (d(s) * E[return] = 1).
    """
    R, idx, closed = _restart_support(mdp, policy)
    if len(closed) != 1:
        raise ModelError("restart chain must have exactly one closed class")
    out = np.full(mdp.num_states, np.inf)
    recurrent = closed[0]
    for s in recurrent:
        others = recurrent[recurrent != s]
        Q = R[np.ix_(others, others)]
        hit = linalg.solve(np.eye(others.size) - Q, np.ones(others.size)) if others.size else np.zeros(0)
        out[s] = 1.0 + R[s, others] @ hit
    return out


def expected_quantities(mdp: TabularMdp, policy: Policy, gamma=None):
    """``(E[T], E[gamma^T])`` for episodes started from the initial law under ``policy``."""
    g = _gamma(mdp, gamma)
    chain = build_chain(mdp, policy)
    adj = (chain.p_pi > 0).astype(np.int8)
    reach = _reachable(adj, mdp.initial_dist > 0)
    can_stop = _reachable(adj.T, chain.term_prob > 0)
    stuck = np.flatnonzero(reach & ~can_stop)
    if stuck.size:
        raise ModelError(f"episodes never terminate from reachable states {stuck.tolist()}")
    idx = np.flatnonzero(reach)
    P = chain.p_pi[np.ix_(idx, idx)]
    h = linalg.solve(np.eye(idx.size) - P, np.ones(idx.size))
    expected_len = float(mdp.initial_dist[idx] @ h)
    z = linalg.solve(np.eye(mdp.num_states) - g * chain.p_pi, g * chain.term_prob)
    gamma_mass = float(mdp.initial_dist @ z)
    return expected_len, gamma_mass


def q_values(mdp: TabularMdp, policy: Policy, gamma=None) -> np.ndarray:
    g = _gamma(mdp, gamma)
    S, A = mdp.num_states, mdp.num_actions
    if policy.probs.shape != (S, A):
        raise InputError("policy shape does not match MDP")
    P_sa = mdp.transition.reshape(S * A, S)
    Pi = np.zeros((S, S * A))
    for s in range(S):
        Pi[s, s * A:(s + 1) * A] = policy.probs[s]
    q = linalg.solve(np.eye(S * A) - g * P_sa @ Pi, mdp.reward.reshape(-1))
    return q.reshape(S, A)


def j_pi(mdp: TabularMdp, policy: Policy, gamma=None) -> float:
    d = discounted_stationary(mdp, policy, gamma)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return float(d @ r_pi)


# --------------------------------------------------------------------------
# report

@dataclass(frozen=True, eq=False)
class OracleReport:
    d_pi_gamma: np.ndarray
    d_mu: np.ndarray
    density_ratio: np.ndarray
    j_pi: float
    expected_len_mu: float
    gamma_mass_pi: float
    q_pi: np.ndarray

    def to_dict(self):
        def clean(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        return {
            "d_pi_gamma": clean(self.d_pi_gamma),
            "d_mu": clean(self.d_mu),
            "density_ratio": clean(self.density_ratio),
            "j_pi": self.j_pi,
            "expected_len_mu": self.expected_len_mu,
            "gamma_mass_pi": self.gamma_mass_pi,
            "q_pi": self.q_pi.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        def vec(v):
            return np.array([np.nan if x is None else x for x in v], dtype=float)

        return cls(vec(doc["d_pi_gamma"]), vec(doc["d_mu"]), vec(doc["density_ratio"]),
                   float(doc["j_pi"]), float(doc["expected_len_mu"]),
                   float(doc["gamma_mass_pi"]), np.array(doc["q_pi"], dtype=float))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_report(mdp: TabularMdp, target: Policy, behaviour: Policy, gamma=None) -> OracleReport:
    g = _gamma(mdp, gamma)
    d_pg = discounted_stationary(mdp, target, g)
    d_mu = undiscounted_stationary(mdp, behaviour)
    uncovered = np.flatnonzero((d_pg > 1e-12) & (d_mu <= 0))
    if uncovered.size:
        raise ModelError(f"behaviour never visits states {uncovered.tolist()} that the target reaches")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d_mu > 0, d_pg / d_mu, np.nan)
    expected_len, _ = expected_quantities(mdp, behaviour, g)
    _, gamma_mass = expected_quantities(mdp, target, g)
    return OracleReport(d_pg, d_mu, ratio, j_pi(mdp, target, g), expected_len, gamma_mass,
                        q_values(mdp, target, g))


# --------------------------------------------------------------------------
# fixed point of the incremental linear update

@dataclass(frozen=True, eq=False)
class FixedPointSystem:
    G: np.ndarray
    g: np.ndarray
    solution: np.ndarray
    features: np.ndarray
    H: float
    lambda1: float
    lambda2: float

    @property
    def theta(self):
        return self.solution[:-1]

    @property
    def eta(self):
        return float(self.solution[-1])


def fixed_point_matrices(features, d_mu, density_ratio, expected_len_mu, gamma,
                         lambda1, lambda2, H=None):
    """Mean update matrix G and offset g for the stacked parameter (theta, eta)."""
    Phi = np.asarray(features, dtype=float)
    d_mu = np.asarray(d_mu, dtype=float)
    y = np.nan_to_num(np.asarray(density_ratio, dtype=float), nan=0.0)
    H = expected_len_mu if H is None else H
    k = Phi.shape[1]
    c = lambda2 * H * (1.0 - gamma)
    Phi_d = Phi.T @ d_mu
    G = np.zeros((k + 1, k + 1))
    G[:k, :k] = -(Phi.T * d_mu) @ Phi - lambda1 * np.eye(k)
    G[:k, k] = -c * Phi_d
    G[k, :k] = c * Phi_d
    G[k, k] = -lambda2
    g = np.empty(k + 1)
    g[:k] = (Phi.T * d_mu) @ y / ((1.0 - gamma) * expected_len_mu)
    g[k] = -lambda2
    return G, g


def assemble_fixed_point(features, d_mu, density_ratio, expected_len_mu, gamma,
                         lambda1, lambda2, H=None) -> FixedPointSystem:
    """Closed-form limit -G^{-1} g of the incremental Average-DICE update.

    With ``lambda2 == 0`` the dual variable has no dynamics (its row of G is
    zero); the primal block is solved alone and eta is reported as 0.
    """
    Phi = np.asarray(features, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != len(d_mu):
        raise InputError(f"features must be [{len(d_mu)}][d], got {Phi.shape}")
    if lambda1 < 0 or lambda2 < 0:
        raise InputError("regularisation weights must be nonnegative")
    H = expected_len_mu if H is None else float(H)
    if H <= 0:
        raise InputError("H must be positive")
    G, g = fixed_point_matrices(Phi, d_mu, density_ratio, expected_len_mu, gamma,
                                lambda1, lambda2, H)
    k = Phi.shape[1]
    sv = np.linalg.svd(Phi, compute_uv=False)
    rank = int((sv > RANK_TOL * max(sv[0], 1.0)).sum()) if sv.size else 0
    if rank < k and lambda1 == 0:
        raise NumericalError(
            f"G is singular (features rank {rank} < {k}, lambda1 = 0); "
            f"eigenvalues {np.linalg.eigvals(G).tolist()}"
        )
    if lambda2 == 0:
        theta = linalg.solve(G[:k, :k], -g[:k])
        x = np.append(theta, 0.0)
    else:
        x = linalg.solve(G, -g)
    if not np.isfinite(x).all():
        raise NumericalError(f"fixed-point solve failed; eigenvalues {np.linalg.eigvals(G).tolist()}")
    return FixedPointSystem(G, g, x, Phi, H, float(lambda1), float(lambda2))


def check_hurwitz(G):
    """``(is_hurwitz, eigenvalues)``: all real parts below -1e-12."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InputError("G must be square")
    eig = np.linalg.eigvals(G)
    return bool(eig.real.max() < -HURWITZ_TOL), eig
