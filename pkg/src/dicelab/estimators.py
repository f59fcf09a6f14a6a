"""Density-ratio and policy-value estimators.

Average-DICE reweights each logged state by ``(n/K)(1-g)`` times the average of
``g**time * rho_prod`` over that state's occurrences. The tabular form counts
exactly; the linear form regresses ``g**time * rho_prod`` on state features
with a parameter penalty and a distribution penalty held in saddle form by a
scalar dual variable ``eta``.

Baselines: expected-next-action off-policy TD, ratio TD (COP-TD style), and
the plain average reward.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from dicelab import kernels
from dicelab.dataset import TrajectoryDataset, empirical_distribution
from dicelab.errors import InputError, NumericalError
from dicelab.mdp import Policy, TabularMdp, sample_restart_stream

LOG_SPACE_AFTER = 500

# Default regularisation for the regression form.
DEFAULT_LAMBDA1 = 0.001
DEFAULT_LAMBDA2 = 0.5
DEFAULT_LR = 0.0005


def log_every(total, log_points):
    """Logging stride that keeps a curve at or under ``log_points`` points."""
    return max(1, -(-total // log_points))


def discount_powers(times, gamma):
    """``gamma ** times``; times beyond 500 go through log space."""
    times = np.asarray(times, dtype=np.int64)
    if not 0.0 <= gamma < 1.0:
        raise InputError(f"gamma must lie in [0, 1), got {gamma}")
    out = np.power(gamma, times.astype(np.float64))
    late = times > LOG_SPACE_AFTER
    if late.any() and gamma > 0:
        out[late] = np.exp(times[late] * np.log(gamma))
    return out


def regression_targets(ds: TrajectoryDataset, gamma):
    return discount_powers(ds.times, gamma) * ds.rho_prod


def _trajectory_multiplier(ds):
    """n / K with K the number of completed trajectories."""
    k = ds.num_completed
    if k == 0:
        raise InputError("dataset has no completed trajectory (K = 0)")
    return ds.num_transitions / k


@dataclass(frozen=True, eq=False)
class TabularCorrection:
    count: np.ndarray
    weighted_sum: np.ndarray
    c: np.ndarray
    n: int
    K: int
    gamma: float

    @property
    def visited(self):
        return self.count > 0

    @property
    def mass(self):
        """sum_s d_hat(s) c(s), the empirical total mass of the corrected distribution."""
        return float((self.count / self.n) @ self.c)


def tabular_average_dice(ds: TrajectoryDataset, gamma: float) -> TabularCorrection:
    mult = _trajectory_multiplier(ds)
    y = regression_targets(ds, gamma)
    count = np.bincount(ds.states, minlength=ds.num_states)
    wsum = np.bincount(ds.states, weights=y, minlength=ds.num_states)
    c = np.zeros(ds.num_states)
    seen = count > 0
    c[seen] = mult * (1.0 - gamma) * wsum[seen] / count[seen]
    return TabularCorrection(count, wsum, c, ds.num_transitions, ds.num_completed, float(gamma))


@dataclass(eq=False)
class RatioEstimate:
    ratio: np.ndarray
    j_hat: float
    diagnostics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (step, j_hat) pairs


def estimate_j(ds: TrajectoryDataset, ratio) -> float:
    """Reweighted average reward (1/n) sum_t ratio[S_t] R_t.

    ``ratio`` already carries any (n/K)(1-gamma) factor. Rewards are taken as
    logged, so the result targets J(pi) only when rewards depend on the state.
    """
    if ds.num_transitions == 0:
        raise InputError("empty dataset")
    ratio = np.asarray(ratio, dtype=float)
    return float(np.mean(ratio[ds.states] * ds.rewards))


def average_dice(ds: TrajectoryDataset, gamma: float) -> RatioEstimate:
    corr = tabular_average_dice(ds, gamma)
    j = estimate_j(ds, corr.c)
    diag = {"mass": corr.mass, "n": corr.n, "K": corr.K,
            "unvisited_states": int((~corr.visited).sum())}
    return RatioEstimate(corr.c, j, diag, [(0, j)])


def average_reward_baseline(ds: TrajectoryDataset) -> float:
    if ds.num_transitions == 0:
        raise InputError("average reward of an empty dataset")
    return float(ds.rewards.mean())


def max_relative_error(ratio, true_ratio, where=None):
    """max_s |ratio - true| / true over states with a finite, positive true ratio."""
    ratio = np.asarray(ratio, dtype=float)
    true_ratio = np.asarray(true_ratio, dtype=float)
    ok = np.isfinite(true_ratio) & (true_ratio > 0)
    if where is not None:
        ok &= where
    return float(np.max(np.abs(ratio[ok] - true_ratio[ok]) / true_ratio[ok]))


# --------------------------------------------------------------------------
# linear Average-DICE: incremental form

@dataclass(frozen=True)
class StepSchedule:
    """alpha_t = a for ``constant``; a / (1 + t) ** p for ``poly``."""

    a: float = 0.1
    p: float = 0.75
    kind: str = "poly"

    def __post_init__(self):
        if self.kind not in ("poly", "constant"):
            raise InputError(f"unknown schedule kind {self.kind!r}")
        if self.a < 0:
            raise InputError("step size must be nonnegative")
        if self.kind == "poly" and not 0.5 < self.p <= 1.0:
            raise InputError("poly schedule needs 0.5 < p <= 1 for square-summable steps")

    def __call__(self, t):
        return self.a if self.kind == "constant" else self.a / (1.0 + t) ** self.p


@dataclass(frozen=True, eq=False)
class LinearDiceState:
    theta: np.ndarray
    eta: float
    features: np.ndarray
    H: float
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    schedule: StepSchedule = StepSchedule()
    step_count: int = 0

    def __post_init__(self):
        Phi = np.asarray(self.features, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if Phi.ndim != 2 or theta.shape != (Phi.shape[1],):
            raise InputError(f"theta {theta.shape} does not match features {Phi.shape}")
        if not self.H > 0:
            raise InputError("H must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("regularisation weights must be nonnegative")
        object.__setattr__(self, "features", Phi)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "eta", float(self.eta))

    @classmethod
    def initial(cls, features, H, **kwargs):
        Phi = np.asarray(features, dtype=float)
        return cls(np.zeros(Phi.shape[1]), 0.0, Phi, H, **kwargs)

    @property
    def params(self):
        return np.append(self.theta, self.eta)

    @property
    def feature_bound(self):
        """Largest feature-row norm (the L of the boundedness assumption)."""
        return float(np.linalg.norm(self.features, axis=1).max())


def linear_dice_step(state: LinearDiceState, record, gamma: float) -> LinearDiceState:
    """One simultaneous primal/dual update on a single transition record."""
    alpha = state.schedule(state.step_count)
    phi = state.features[record.state]
    y = discount_powers([record.time], gamma)[0] * record.rho_prod
    scale = state.H * (1.0 - gamma)
    f = phi @ state.theta
    eta = state.eta + alpha * state.lambda2 * (scale * f - 1.0 - state.eta)
    theta = state.theta - alpha * (phi * (f - y) + state.lambda2 * state.eta * scale * phi
                                   + state.lambda1 * state.theta)
    if not (np.isfinite(theta).all() and np.isfinite(eta)):
        raise NumericalError(f"non-finite Average-DICE update at step {state.step_count}")
    return replace(state, theta=theta, eta=eta, step_count=state.step_count + 1)


def run_linear_dice(state: LinearDiceState, states, targets, gamma, backend=None,
                    scales=None) -> LinearDiceState:
    """Apply :func:`linear_dice_step` over a stream of (state, target) pairs via the kernel.

    ``scales`` overrides the per-step multiplier H(1-gamma).
    """
    theta = state.theta.copy()
    if scales is None:
        scales = np.full(len(states), state.H * (1.0 - gamma))
    kernel = kernels.pick(kernels.linear_dice_updates, backend)
    sched = state.schedule
    eta, bad = kernel(theta, state.eta, np.ascontiguousarray(state.features),
                      np.ascontiguousarray(states, dtype=np.int64),
                      np.ascontiguousarray(targets, dtype=np.float64),
                      np.ascontiguousarray(scales, dtype=np.float64), state.lambda1, state.lambda2,
                      sched.a, sched.p, sched.kind == "constant", state.step_count)
    if bad >= 0:
        raise NumericalError(f"non-finite Average-DICE update at step {state.step_count + bad}")
    return replace(state, theta=theta, eta=float(eta), step_count=state.step_count + len(states))


def restart_targets(mdp: TabularMdp, behaviour: Policy, target: Policy, gamma, num_steps, seed,
                    backend=None):
    """One restart-chain run: ``(states, targets, ended)`` with targets g**time * rho_prod."""
    states, actions, times, ended = sample_restart_stream(mdp, behaviour, seed, num_steps, backend)
    ratio = np.zeros_like(target.probs)
    np.divide(target.probs, behaviour.probs, out=ratio, where=behaviour.probs > 0)
    rho = kernels.rho_prod(times, ratio[states, actions], backend)
    return states, discount_powers(times, gamma) * rho, ended


def incremental_linear_dice(mdp, behaviour, target, features, gamma, num_steps, seed=0,
                            H=None, lambda1=DEFAULT_LAMBDA1, lambda2=DEFAULT_LAMBDA2,
                            schedule=StepSchedule(), running_multiplier=False,
                            backend=None) -> LinearDiceState:
    """Drive the incremental update with ``num_steps`` transitions of the behaviour restart chain.

    ``H`` defaults to the run's steps per completed episode. ``running_multiplier``
    (experimental, no convergence claim) replaces the fixed H by t / K(t).
    """
    states, y, ended = restart_targets(mdp, behaviour, target, gamma, num_steps, seed, backend)
    if H is None:
        H = num_steps / max(int(ended.sum()), 1)
    st = LinearDiceState.initial(features, H, lambda1=lambda1, lambda2=lambda2, schedule=schedule)
    scales = None
    if running_multiplier:
        episodes = np.maximum(np.cumsum(ended) - ended, 1)
        scales = (np.arange(1, num_steps + 1) / episodes) * (1.0 - gamma)
    return run_linear_dice(st, states, y, gamma, backend, scales=scales)


# --------------------------------------------------------------------------
# linear Average-DICE: batch form on a fixed dataset

def fenchel_maximizer(theta, features, states, scale):
    """argmax over eta of E[eta * scale * f - eta] - eta^2 / 2, i.e. E[scale * f] - 1."""
    f = np.asarray(features)[states] @ theta
    return float(np.mean(scale * f) - 1.0)


def fenchel_objective(eta, theta, features, states, scale, lambda2):
    """lambda2 * (E[eta * scale * f - eta] - eta^2 / 2): the saddle form of the distribution penalty."""
    f = np.asarray(features)[states] @ theta
    return float(lambda2 * (np.mean(eta * scale * f - eta) - eta * eta / 2.0))


def distribution_penalty(theta, features, states, scale, lambda2):
    """(lambda2 / 2) * (E[scale * f] - 1)^2."""
    f = np.asarray(features)[states] @ theta
    return float(lambda2 / 2.0 * (np.mean(scale * f) - 1.0) ** 2)


def regression_loss(theta, features, states, targets, scale, lambda1, lambda2):
    """Full-data objective with the dual variable at its maximiser."""
    f = np.asarray(features)[states] @ theta
    return float(0.5 * np.mean((f - targets) ** 2) + 0.5 * lambda1 * theta @ theta
                 + distribution_penalty(theta, features, states, scale, lambda2))


def batch_linear_dice(ds: TrajectoryDataset, features, gamma, H=None,
                      lambda1=DEFAULT_LAMBDA1, lambda2=DEFAULT_LAMBDA2, lr=DEFAULT_LR,
                      epochs=100, batch_size=512, seed=0, log_points=200) -> RatioEstimate:
    """Mini-batch descent on theta with one dual ascent step on eta per batch.

    The reported ratio is (n/K)(1-gamma) * phi(s)^T theta. ``H`` (the penalty's
    length multiplier) defaults to n/K.
    """
    if batch_size < 1:
        raise InputError("batch_size must be at least 1")
    if epochs < 0:
        raise InputError("epochs must be nonnegative")
    Phi = np.asarray(features, dtype=float)
    if Phi.shape[0] != ds.num_states:
        raise InputError(f"features need one row per state ({ds.num_states}), got {Phi.shape[0]}")
    mult = _trajectory_multiplier(ds)
    H = mult if H is None else float(H)
    scale = H * (1.0 - gamma)
    out_scale = mult * (1.0 - gamma)
    y = regression_targets(ds, gamma)
    X = Phi[ds.states]
    n = ds.num_transitions
    theta = np.zeros(Phi.shape[1])
    eta = 0.0
    rng = np.random.default_rng(seed)
    per_epoch = -(-n // batch_size)
    total = epochs * per_epoch
    every = log_every(total, log_points)

    def snapshot(step):
        loss = regression_loss(theta, Phi, ds.states, y, scale, lambda1, lambda2)
        if not np.isfinite(loss):
            raise NumericalError(f"batch Average-DICE diverged at step {step}")
        ratio = out_scale * (Phi @ theta)
        return step, estimate_j(ds, ratio), loss

    history = [snapshot(0)]
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            xb = X[idx]
            f = xb @ theta
            grad = xb.T @ (f - y[idx]) / idx.size + lambda2 * eta * scale * xb.mean(axis=0) + lambda1 * theta
            eta = eta + lr * lambda2 * (scale * f.mean() - 1.0 - eta)
            theta = theta - lr * grad
            step += 1
            if step % every == 0 or step == total:
                history.append(snapshot(step))
    ratio = out_scale * (Phi @ theta)
    j = estimate_j(ds, ratio)
    diag = {
        "H": H, "multiplier": mult, "eta": eta, "steps": step,
        "loss": history[-1][2], "mass": float(np.mean(ratio[ds.states])),
        "feature_bound": float(np.linalg.norm(Phi, axis=1).max()),
    }
    return RatioEstimate(ratio, j, diag, [(s, jh) for s, jh, _ in history])


# --------------------------------------------------------------------------
# baselines

@dataclass(eq=False)
class TdEstimate:
    q: np.ndarray
    j_hat: float
    diagnostics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def _log_epochs(epochs, log_points):
    every = log_every(epochs, log_points)
    return {e for e in range(1, epochs + 1) if e % every == 0 or e == epochs}


def off_policy_td(ds: TrajectoryDataset, target: Policy, initial_dist, gamma, lr=0.5, decay=0.6,
                  epochs=50, seed=0, log_points=200, backend=None) -> TdEstimate:
    """Tabular TD(0) on Q with the next-action value taken in expectation under ``target``.

    Step size for the k-th update of (s, a) is lr / (1 + k) ** decay.
    J estimate: (1 - gamma) * sum_s nu(s) sum_a pi(a|s) Q(s, a).
    """
    nu = np.asarray(initial_dist, dtype=float)
    pi = np.ascontiguousarray(target.probs)
    q = np.zeros((ds.num_states, ds.num_actions))
    visits = np.zeros_like(q)
    rng = np.random.default_rng(seed)
    sweep = kernels.pick(kernels.td_sweep, backend)
    logs = _log_epochs(epochs, log_points)

    def j_of(q):
        return float((1.0 - gamma) * nu @ np.einsum("sa,sa->s", pi, q))

    history = [(0, 0.0)]
    for e in range(1, epochs + 1):
        order = rng.permutation(ds.num_transitions)
        sweep(q, visits, order, ds.states, ds.actions, ds.rewards, ds.next_states, pi,
              gamma, lr, decay)
        if e in logs:
            history.append((e * ds.num_transitions, j_of(q)))
    if not np.isfinite(q).all():
        raise NumericalError("off-policy TD diverged")
    return TdEstimate(q, j_of(q), {"epochs": epochs}, history)


def cop_td(ds: TrajectoryDataset, initial_dist, gamma, lr=0.5, decay=0.6, epochs=50, seed=0,
           start_term="initial", target: Policy | None = None, behaviour: Policy | None = None,
           log_points=200, backend=None) -> RatioEstimate:
    """Ratio TD: w(s') <- w(s') + a (g rho(a|s) w(s) + (1-g) b(s') - w(s')), clipped at 0.

    Each record is treated as the arrival ``s'`` of the transition from the
    previous record of its trajectory (none at time 0). The start term ``b`` is
    ``nu(s') / d_hat(s')`` by default (``start_term="initial"``), which makes the
    true ratio the zero-error solution; ``"literal"`` uses ``1[time == 0]``.
    Per-step ratios come from the dataset unless both policies are given.
    """
    if start_term not in ("initial", "literal"):
        raise InputError(f"unknown start_term {start_term!r}")
    nu = np.asarray(initial_dist, dtype=float)
    if target is not None and behaviour is not None:
        ratio = np.zeros_like(target.probs)
        np.divide(target.probs, behaviour.probs, out=ratio, where=behaviour.probs > 0)
        rho_step = ratio[ds.states, ds.actions]
    else:
        rho_step = ds.rho_step
    first = ds.times == 0
    prev_states = np.where(first, -1, np.roll(ds.states, 1))
    prev_rho = np.where(first, 0.0, np.roll(rho_step, 1))
    if start_term == "initial":
        d_hat = empirical_distribution(ds)
        bonus = (1.0 - gamma) * nu[ds.states] / d_hat[ds.states]
    else:
        bonus = (1.0 - gamma) * first.astype(float)
    w = np.zeros(ds.num_states)
    visits = np.zeros(ds.num_states)
    rng = np.random.default_rng(seed)
    sweep = kernels.pick(kernels.cop_td_sweep, backend)
    logs = _log_epochs(epochs, log_points)
    history = [(0, 0.0)]
    for e in range(1, epochs + 1):
        order = rng.permutation(ds.num_transitions)
        sweep(w, visits, order, ds.states, prev_states, prev_rho, bonus, gamma, lr, decay)
        if e in logs:
            history.append((e * ds.num_transitions, estimate_j(ds, w)))
    if not np.isfinite(w).all():
        raise NumericalError("COP-TD diverged")
    j = estimate_j(ds, w)
    return RatioEstimate(w, j, {"epochs": epochs, "mass": float(np.mean(w[ds.states]))}, history)
