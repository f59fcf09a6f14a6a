"""Hot inner loops: trajectory sampling and the per-transition stochastic updates.

Each kernel has a numba-compiled form and a pure-numpy form. ``use_numba()``
picks one at call time (``DICELAB_DISABLE_NUMBA=1`` forces numpy). Both forms
consume the same counter-based uniforms in the same order, so their outputs are
bitwise identical; ``tests/test_kernels.py`` checks this.

Draw order within a stream: one draw for the initial state, then per step one
draw for the action and one for the next state (or termination).
"""
import numpy as np

from dicelab import rng
from dicelab._accel import jit, use_numba

TERMINAL = -1


def categorical_cdf(probs):
    """Row-wise CDF over the last axis, padded so zero-mass tails are never drawn.

    Entries from the last positive-mass outcome onward are set to exactly 1.0;
    with ``u`` in [0, 1) the draw ``#{k : cdf[k] <= u}`` then always lands on a
    positive-mass outcome.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    flat_p = probs.reshape(-1, probs.shape[-1])
    flat_c = cdf.reshape(-1, probs.shape[-1])
    for row in range(flat_p.shape[0]):
        pos = np.flatnonzero(flat_p[row] > 0)
        if pos.size:
            flat_c[row, pos[-1]:] = 1.0
    return flat_c.reshape(probs.shape)


@jit
def _draw(cdf_row, u):
    k = 0
    m = cdf_row.shape[0]
    while k < m - 1 and cdf_row[k] <= u:
        k += 1
    return k


def _draw_rows(cdf_rows, u):
    k = (cdf_rows <= u[:, None]).sum(axis=1)
    return np.minimum(k, cdf_rows.shape[1] - 1)


# --------------------------------------------------------------------------
# trajectory batches

@jit
def _sample_batch_jit(init_cdf, act_cdf, next_cdf, reward, keys, max_len, capacity):
    num_states = init_cdf.shape[0]
    n_traj = keys.shape[0]
    traj = np.empty(capacity, dtype=np.int64)
    time = np.empty(capacity, dtype=np.int64)
    state = np.empty(capacity, dtype=np.int64)
    action = np.empty(capacity, dtype=np.int64)
    rew = np.empty(capacity, dtype=np.float64)
    nxt = np.empty(capacity, dtype=np.int64)
    terminated = np.zeros(n_traj, dtype=np.bool_)
    pos = 0
    for i in range(n_traj):
        key = keys[i]
        s = _draw(init_cdf, rng.uniform(key, 0))
        c = 1
        for t in range(max_len):
            if pos >= capacity:
                return traj, time, state, action, rew, nxt, terminated, -1
            a = _draw(act_cdf[s], rng.uniform(key, c))
            o = _draw(next_cdf[s, a], rng.uniform(key, c + 1))
            c += 2
            traj[pos] = i
            time[pos] = t
            state[pos] = s
            action[pos] = a
            rew[pos] = reward[s, a]
            if o == num_states:
                nxt[pos] = TERMINAL
                pos += 1
                terminated[i] = True
                break
            nxt[pos] = o
            pos += 1
            s = o
    return traj, time, state, action, rew, nxt, terminated, pos


def _sample_batch_numpy(init_cdf, act_cdf, next_cdf, reward, keys, max_len):
    """Lockstep version: every live trajectory advances one step per iteration."""
    num_states = init_cdf.shape[0]
    n_traj = keys.shape[0]
    s = _draw_rows(np.broadcast_to(init_cdf, (n_traj, num_states)), rng.uniform_array(keys, 0))
    live = np.arange(n_traj)
    terminated = np.zeros(n_traj, dtype=bool)
    cols = {k: [] for k in ("traj", "time", "state", "action", "reward", "next")}
    for t in range(max_len):
        if live.size == 0:
            break
        k = keys[live]
        a = _draw_rows(act_cdf[s], rng.uniform_array(k, 2 * t + 1))
        o = _draw_rows(next_cdf[s, a], rng.uniform_array(k, 2 * t + 2))
        done = o == num_states
        cols["traj"].append(live)
        cols["time"].append(np.full(live.size, t))
        cols["state"].append(s)
        cols["action"].append(a)
        cols["reward"].append(reward[s, a])
        cols["next"].append(np.where(done, TERMINAL, o))
        terminated[live[done]] = True
        live = live[~done]
        s = o[~done]
    if not cols["traj"]:
        empty_i = np.empty(0, dtype=np.int64)
        return empty_i, empty_i, empty_i, empty_i, np.empty(0), empty_i, terminated
    out = {name: np.concatenate(v) for name, v in cols.items()}
    order = np.lexsort((out["time"], out["traj"]))
    return (
        out["traj"][order].astype(np.int64),
        out["time"][order].astype(np.int64),
        out["state"][order].astype(np.int64),
        out["action"][order].astype(np.int64),
        out["reward"][order].astype(np.float64),
        out["next"][order].astype(np.int64),
        terminated,
    )


def sample_batch(init_cdf, act_cdf, next_cdf, reward, keys, max_len, backend=None):
    """Sample one trajectory per key. Returns flat columns sorted by (traj, time).

    Columns: traj, time, state, action, reward, next_state (TERMINAL = -1),
    plus a per-trajectory ``terminated`` flag.
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    backend = backend or ("numba" if use_numba() else "numpy")
    if backend == "numpy":
        return _sample_batch_numpy(init_cdf, act_cdf, next_cdf, reward, keys, int(max_len))
    capacity = max(16, min(keys.shape[0] * int(max_len), 64 * keys.shape[0]))
    while True:
        *cols, n = _sample_batch_jit(init_cdf, act_cdf, next_cdf, reward, keys, int(max_len), capacity)
        if n >= 0:
            traj, time, state, action, rew, nxt, terminated = cols
            return traj[:n], time[:n], state[:n], action[:n], rew[:n], nxt[:n], terminated
        capacity = min(2 * capacity, keys.shape[0] * int(max_len))


# --------------------------------------------------------------------------
# restart stream

@jit
def _restart_stream_jit(init_cdf, act_cdf, next_cdf, key, num_steps):
    num_states = init_cdf.shape[0]
    state = np.empty(num_steps, dtype=np.int64)
    action = np.empty(num_steps, dtype=np.int64)
    time = np.empty(num_steps, dtype=np.int64)
    ended = np.zeros(num_steps, dtype=np.bool_)
    c = 0
    s = -1
    t = 0
    for k in range(num_steps):
        if s < 0:
            s = _draw(init_cdf, rng.uniform(key, c))
            c += 1
            t = 0
        a = _draw(act_cdf[s], rng.uniform(key, c))
        o = _draw(next_cdf[s, a], rng.uniform(key, c + 1))
        c += 2
        state[k] = s
        action[k] = a
        time[k] = t
        if o == num_states:
            ended[k] = True
            s = -1
        else:
            s = o
            t += 1
    return state, action, time, ended


def _restart_stream_numpy(init_cdf, act_cdf, next_cdf, key, num_steps):
    num_states = init_cdf.shape[0]
    # at most 3 draws per step; consumed strictly in counter order
    u = rng.uniform_array(key, np.arange(3 * num_steps, dtype=np.uint64)).tolist()
    init_cdf = init_cdf.tolist()
    act_cdf = act_cdf.tolist()
    next_cdf = next_cdf.tolist()

    def draw(row, x):
        k = 0
        while k < len(row) - 1 and row[k] <= x:
            k += 1
        return k

    state = np.empty(num_steps, dtype=np.int64)
    action = np.empty(num_steps, dtype=np.int64)
    time = np.empty(num_steps, dtype=np.int64)
    ended = np.zeros(num_steps, dtype=bool)
    c = 0
    s = -1
    t = 0
    for k in range(num_steps):
        if s < 0:
            s = draw(init_cdf, u[c])
            c += 1
            t = 0
        a = draw(act_cdf[s], u[c])
        o = draw(next_cdf[s][a], u[c + 1])
        c += 2
        state[k] = s
        action[k] = a
        time[k] = t
        if o == num_states:
            ended[k] = True
            s = -1
        else:
            s = o
            t += 1
    return state, action, time, ended


def restart_stream(init_cdf, act_cdf, next_cdf, key, num_steps, backend=None):
    """One long run of the restart chain: termination jumps back to the initial law."""
    backend = backend or ("numba" if use_numba() else "numpy")
    fn = _restart_stream_jit if backend == "numba" else _restart_stream_numpy
    return fn(init_cdf, act_cdf, next_cdf, np.uint64(key), int(num_steps))


# --------------------------------------------------------------------------
# importance-sampling products

@jit
def _rho_prod_jit(time, rho_step):
    n = time.shape[0]
    out = np.empty(n, dtype=np.float64)
    for k in range(n):
        if time[k] == 0:
            out[k] = 1.0
        else:
            out[k] = out[k - 1] * rho_step[k - 1]
    return out


def _rho_prod_numpy(time, rho_step):
    out = np.empty(time.shape[0], dtype=np.float64)
    starts = np.flatnonzero(time == 0)
    ends = np.append(starts[1:], time.shape[0])
    for a, b in zip(starts, ends):
        out[a] = 1.0
        if b - a > 1:
            out[a + 1:b] = np.cumprod(rho_step[a:b - 1])
    return out


def rho_prod(time, rho_step, backend=None):
    """Products of per-step IS ratios over strictly earlier steps of each trajectory.

    ``time`` must restart at 0 at each trajectory boundary, records in order.
    """
    backend = backend or ("numba" if use_numba() else "numpy")
    time = np.ascontiguousarray(time, dtype=np.int64)
    rho_step = np.ascontiguousarray(rho_step, dtype=np.float64)
    if backend == "numba":
        return _rho_prod_jit(time, rho_step)
    return _rho_prod_numpy(time, rho_step)


# --------------------------------------------------------------------------
# stochastic updates

@jit
def linear_dice_updates(theta, eta, features, states, targets, scales, lam1, lam2,
                        a, p, constant, step0):
    """In-place Average-DICE primal/dual updates over a stream of (state, target).

    ``scales[k]`` is the length multiplier H(1-gamma) used at step k. Returns
    ``(eta, bad)`` where ``bad`` is the local index of the first non-finite
    update, or -1.
    """
    d = theta.shape[0]
    for k in range(states.shape[0]):
        if constant:
            alpha = a
        else:
            alpha = a / (1.0 + step0 + k) ** p
        phi = features[states[k]]
        f = 0.0
        for i in range(d):
            f += phi[i] * theta[i]
        resid = f - targets[k]
        scale = scales[k]
        new_eta = eta + alpha * lam2 * (scale * f - 1.0 - eta)
        coef = lam2 * eta * scale
        ok = np.isfinite(new_eta)
        for i in range(d):
            theta[i] -= alpha * (phi[i] * resid + coef * phi[i] + lam1 * theta[i])
            if not np.isfinite(theta[i]):
                ok = False
        eta = new_eta
        if not ok:
            return eta, k
    return eta, -1


@jit
def td_sweep(q, visits, order, states, actions, rewards, next_states, target, gamma, lr, decay):
    """One pass of expected-next-action TD(0) over records in ``order`` (in place)."""
    num_actions = q.shape[1]
    for idx in order:
        s = states[idx]
        a = actions[idx]
        s2 = next_states[idx]
        v_next = 0.0
        if s2 >= 0:
            for b in range(num_actions):
                v_next += target[s2, b] * q[s2, b]
        alpha = lr / (1.0 + visits[s, a]) ** decay
        q[s, a] += alpha * (rewards[idx] + gamma * v_next - q[s, a])
        visits[s, a] += 1


@jit
def cop_td_sweep(w, visits, order, states, prev_states, prev_rho, bonus, gamma, lr, decay):
    """One pass of ratio TD over records in ``order``; ``prev_states`` is -1 at trajectory starts."""
    for idx in order:
        s = states[idx]
        target = bonus[idx]
        ps = prev_states[idx]
        if ps >= 0:
            target += gamma * prev_rho[idx] * w[ps]
        alpha = lr / (1.0 + visits[s]) ** decay
        w[s] += alpha * (target - w[s])
        if w[s] < 0.0:
            w[s] = 0.0
        visits[s] += 1


def pick(kernel, backend=None):
    """Compiled kernel, or its interpreted body when numba is off."""
    backend = backend or ("numba" if use_numba() else "numpy")
    return kernel if backend == "numba" else kernel.py_func
