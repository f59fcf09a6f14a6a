"""Finite episodic MDPs, stochastic policies, induced chains, and seeded sampling."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dicelab import kernels, rng
from dicelab.errors import InputError

TERMINAL = kernels.TERMINAL
PROB_TOL = 1e-12
DEFAULT_MAX_LEN = 100


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Episodic MDP with an explicit termination mass per (state, action).

    ``transition[s, a, s'] + ...`` summed over ``s'`` plus ``termination[s, a]``
    is 1 for every (s, a); the termination state itself is not a row.
    """

    transition: np.ndarray
    termination: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float = 0.95

    def __post_init__(self):
        P = _frozen(self.transition)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or 0 in P.shape:
            raise InputError(f"transition must be [S][A][S], got shape {P.shape}")
        S, A, _ = P.shape
        term = _frozen(self.termination)
        rew = _frozen(self.reward)
        nu = _frozen(self.initial_dist)
        if term.shape != (S, A):
            raise InputError(f"termination must be [{S}][{A}], got {term.shape}")
        if rew.shape != (S, A):
            raise InputError(f"reward must be [{S}][{A}], got {rew.shape}")
        if nu.shape != (S,):
            raise InputError(f"initial_dist must have {S} entries, got {nu.shape}")
        if (P < 0).any() or (term < 0).any() or (nu < 0).any():
            raise InputError("probabilities must be nonnegative")
        if not np.isfinite(rew).all():
            raise InputError("rewards must be finite")
        row = P.sum(axis=2) + term
        bad = np.argwhere(np.abs(row - 1.0) > PROB_TOL)
        if bad.size:
            s, a = bad[0]
            raise InputError(f"transition + termination at (s={s}, a={a}) sums to {row[s, a]!r}")
        if abs(nu.sum() - 1.0) > PROB_TOL:
            raise InputError(f"initial_dist sums to {nu.sum()!r}")
        gamma = float(self.discount)
        if not 0.0 < gamma < 1.0:
            raise InputError(f"discount must lie in (0, 1), got {gamma}")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "termination", term)
        object.__setattr__(self, "reward", rew)
        object.__setattr__(self, "initial_dist", nu)
        object.__setattr__(self, "discount", gamma)

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    def with_discount(self, gamma):
        return replace(self, discount=gamma)

    def to_dict(self):
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "termination": self.termination.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            mdp = cls(doc["transition"], doc["termination"], doc["reward"],
                      doc["initial_dist"], doc.get("discount", 0.95))
        except KeyError as exc:
            raise InputError(f"environment document missing key {exc}") from None
        for key, got in (("num_states", mdp.num_states), ("num_actions", mdp.num_actions)):
            if key in doc and int(doc[key]) != got:
                raise InputError(f"{key}={doc[key]} disagrees with array shapes ({got})")
        return mdp


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2 or 0 in p.shape:
            raise InputError(f"policy must be [S][A], got shape {p.shape}")
        if (p < 0).any():
            raise InputError("policy probabilities must be nonnegative")
        sums = p.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
        if bad.size:
            raise InputError(f"policy row {bad[0]} sums to {sums[bad[0]]!r}")
        object.__setattr__(self, "probs", p)

    @property
    def num_states(self):
        return self.probs.shape[0]

    @property
    def num_actions(self):
        return self.probs.shape[1]

    def digest(self):
        """Short content hash used to tag datasets with their policies."""
        return hashlib.sha256(np.ascontiguousarray(self.probs).tobytes()).hexdigest()[:16]


def uniform_policy(num_states, num_actions):
    return Policy(np.full((num_states, num_actions), 1.0 / num_actions))


def mix_policy(base: Policy, eps: float) -> Policy:
    """(1 - eps) * base + eps * uniform; eps is the weight on the random policy."""
    if not 0.0 <= eps <= 1.0:
        raise InputError(f"mixing weight must lie in [0, 1], got {eps}")
    u = 1.0 / base.num_actions
    return Policy((1.0 - eps) * base.probs + eps * u)


def temper_policy(base: Policy, scale: float) -> Policy:
    """Flatten (scale > 1) or sharpen (scale < 1) a policy: probs ** (1/scale), renormalised.

    Tabular stand-in for widening a Gaussian policy's variance.
    """
    if scale <= 0:
        raise InputError(f"var scale must be positive, got {scale}")
    if scale == 1.0:
        return base
    with np.errstate(divide="ignore"):
        logits = np.log(base.probs) / scale
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return Policy(w / w.sum(axis=1, keepdims=True))


def behaviour_policy(target: Policy, eps: float, var_scale: float = 1.0) -> Policy:
    return mix_policy(temper_policy(target, var_scale), eps)


def _check_pair(mdp: TabularMdp, policy: Policy):
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise InputError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states} states, {mdp.num_actions} actions)"
        )


@dataclass(frozen=True, eq=False)
class MarkovChain:
    p_pi: np.ndarray
    term_prob: np.ndarray
    restart_chain: np.ndarray


def build_chain(mdp: TabularMdp, policy: Policy) -> MarkovChain:
    _check_pair(mdp, policy)
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    term = np.einsum("sa,sa->s", policy.probs, mdp.termination)
    restart = p_pi + np.outer(term, mdp.initial_dist)
    return MarkovChain(_frozen(p_pi), _frozen(term), _frozen(restart))


# --------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class SamplingTables:
    init_cdf: np.ndarray
    act_cdf: np.ndarray
    next_cdf: np.ndarray
    reward: np.ndarray


def sampling_tables(mdp: TabularMdp, policy: Policy) -> SamplingTables:
    _check_pair(mdp, policy)
    outcomes = np.concatenate([mdp.transition, mdp.termination[:, :, None]], axis=2)
    return SamplingTables(
        init_cdf=np.ascontiguousarray(kernels.categorical_cdf(mdp.initial_dist)),
        act_cdf=np.ascontiguousarray(kernels.categorical_cdf(policy.probs)),
        next_cdf=np.ascontiguousarray(kernels.categorical_cdf(outcomes)),
        reward=np.ascontiguousarray(mdp.reward),
    )


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminated: bool

    def __len__(self):
        return self.states.shape[0]

    def steps(self):
        """(state, action, reward, next_state) tuples; next_state is TERMINAL at the end of a finished episode."""
        return list(zip(self.states.tolist(), self.actions.tolist(),
                        self.rewards.tolist(), self.next_states.tolist()))


def sample_trajectories(mdp, policy, seed, num_trajectories, max_len=DEFAULT_MAX_LEN,
                        first_index=0, backend=None):
    """Sample trajectories ``first_index .. first_index + K - 1`` of run ``seed``.

    Trajectory ``i`` draws from its own counter-based stream keyed by
    ``(seed, i)``, so the result for a given index never depends on K.
    Returns the flat columns of :func:`dicelab.kernels.sample_batch`.
    """
    if max_len < 1:
        raise InputError("max_len must be at least 1")
    if num_trajectories < 0:
        raise InputError("num_trajectories must be nonnegative")
    tables = sampling_tables(mdp, policy)
    keys = rng.stream_key_array(seed, np.arange(first_index, first_index + num_trajectories))
    return kernels.sample_batch(tables.init_cdf, tables.act_cdf, tables.next_cdf,
                                tables.reward, keys, max_len, backend=backend)


def sample_trajectory(mdp: TabularMdp, policy: Policy, rng_seed: int,
                      max_len: int = DEFAULT_MAX_LEN, index: int = 0, backend=None) -> Trajectory:
    _, _, s, a, r, s2, term = sample_trajectories(mdp, policy, rng_seed, 1, max_len,
                                                  first_index=index, backend=backend)
    return Trajectory(s, a, r, s2, bool(term[0]))


def sample_restart_stream(mdp, policy, seed, num_steps, backend=None):
    """Run the restart chain for ``num_steps`` transitions.

    Returns ``(states, actions, times, ended)``; ``ended[k]`` marks the step on
    which an episode terminated (the next step restarts from the initial law).
    """
    tables = sampling_tables(mdp, policy)
    key = rng.stream_key_array(seed, [0])[0]
    return kernels.restart_stream(tables.init_cdf, tables.act_cdf, tables.next_cdf,
                                  key, num_steps, backend=backend)


# --------------------------------------------------------------------------
# environments

@dataclass(frozen=True)
class Environment:
    name: str
    mdp: TabularMdp
    target: Policy
    notes: dict = field(default_factory=dict)


SLIP = 0.1


def chain_env(n, slip=SLIP, gamma=0.95):
    """Left-to-right chain. Action 0 advances, action 1 retreats; each slips (stays put) w.p. ``slip``.

    Advancing from the last state terminates the episode. Start in state 0.
    Reward depends on the state only: r(s) = (s + 1) / n. Target advances w.p. 0.9.
    """
    if n < 2:
        raise InputError("chain needs at least 2 states")
    P = np.zeros((n, 2, n))
    term = np.zeros((n, 2))
    for s in range(n):
        P[s, 0, s] += slip
        if s + 1 < n:
            P[s, 0, s + 1] += 1.0 - slip
        else:
            term[s, 0] = 1.0 - slip
        P[s, 1, s] += slip
        P[s, 1, max(s - 1, 0)] += 1.0 - slip
    reward = np.repeat(((np.arange(n) + 1.0) / n)[:, None], 2, axis=1)
    nu = np.zeros(n)
    nu[0] = 1.0
    target = Policy(np.tile([0.9, 0.1], (n, 1)))
    return Environment(f"chain:{n}", TabularMdp(P, term, reward, nu, gamma), target,
                       {"slip": slip})


def loop_env(n, slip=SLIP, stop=0.1, gamma=0.95):
    """Ring of ``n`` states. Action 0 steps clockwise, action 1 counter-clockwise, slip stays put.

    Every step ends the episode w.p. ``stop``. Start in state 0; r(s) = 1 on the far
    half of the ring (s >= n // 2), else 0. Target goes clockwise w.p. 0.9.
    """
    if n < 2:
        raise InputError("loop needs at least 2 states")
    P = np.zeros((n, 2, n))
    for s in range(n):
        for a, step in ((0, 1), (1, -1)):
            P[s, a, s] += (1.0 - stop) * slip
            P[s, a, (s + step) % n] += (1.0 - stop) * (1.0 - slip)
    term = np.full((n, 2), stop)
    reward = np.repeat((np.arange(n) >= n // 2).astype(float)[:, None], 2, axis=1)
    nu = np.zeros(n)
    nu[0] = 1.0
    target = Policy(np.tile([0.9, 0.1], (n, 1)))
    return Environment(f"loop:{n}", TabularMdp(P, term, reward, nu, gamma), target,
                       {"slip": slip, "stop": stop})


_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))  # up, down, left, right as (dx, dy)


def gridworld_env(width, height, slip=SLIP, gamma=0.95):
    """``width`` x ``height`` grid, state = y * width + x, start (0, 0), goal (W-1, H-1).

    Actions up/down/left/right move one cell (blocked moves stay), slipping in place
    w.p. ``slip``. Any action at the goal ends the episode. r(s) = 1 at the goal,
    0 elsewhere. Target: down/right w.p. 0.45 each, up/left 0.05 each.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise InputError("gridworld needs at least 2 cells")
    n = width * height
    goal = n - 1
    P = np.zeros((n, 4, n))
    term = np.zeros((n, 4))
    for y in range(height):
        for x in range(width):
            s = y * width + x
            if s == goal:
                term[s, :] = 1.0
                continue
            for a, (dx, dy) in enumerate(_MOVES):
                nx, ny = x + dx, y + dy
                if not (0 <= nx < width and 0 <= ny < height):
                    nx, ny = x, y
                P[s, a, s] += slip
                P[s, a, ny * width + nx] += 1.0 - slip
    reward = np.zeros((n, 4))
    reward[goal, :] = 1.0
    nu = np.zeros(n)
    nu[0] = 1.0
    target = Policy(np.tile([0.05, 0.45, 0.05, 0.45], (n, 1)))
    return Environment(f"gridworld:{width}x{height}", TabularMdp(P, term, reward, nu, gamma),
                       target, {"slip": slip})


BUILTIN_ENVS = ("chain:5", "chain:13", "loop:8", "gridworld:4x4")


def make_env(spec: str, gamma: float | None = None) -> Environment:
    """Build an environment from ``chain:N``, ``loop:N``, ``gridworld:WxH`` or a JSON path.

    JSON files follow :meth:`TabularMdp.from_dict`, plus an optional
    ``target_policy`` ([S][A]); the target defaults to uniform.
    """
    kwargs = {} if gamma is None else {"gamma": gamma}
    if m := re.fullmatch(r"chain:(\d+)", spec):
        return chain_env(int(m[1]), **kwargs)
    if m := re.fullmatch(r"loop:(\d+)", spec):
        return loop_env(int(m[1]), **kwargs)
    if m := re.fullmatch(r"gridworld:(\d+)x(\d+)", spec):
        return gridworld_env(int(m[1]), int(m[2]), **kwargs)
    path = Path(spec)
    if not path.is_file():
        raise InputError(f"unknown environment spec {spec!r}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    mdp = TabularMdp.from_dict(doc)
    if gamma is not None:
        mdp = mdp.with_discount(gamma)
    if "target_policy" in doc:
        target = Policy(doc["target_policy"])
        _check_pair(mdp, target)
    else:
        target = uniform_policy(mdp.num_states, mdp.num_actions)
    return Environment(str(path), mdp, target)


def save_env(env: Environment, path):
    doc = env.mdp.to_dict()
    doc["target_policy"] = env.target.probs.tolist()
    Path(path).write_text(json.dumps(doc, indent=1))
