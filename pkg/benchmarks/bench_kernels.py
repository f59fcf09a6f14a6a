"""Time the compiled kernels against their numpy / interpreted fallbacks.

    python benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]

Each row also checks that both paths return identical arrays.
"""
import argparse
import time

import numpy as np

from dicelab import kernels
from dicelab._accel import HAVE_NUMBA
from dicelab.mdp import behaviour_policy, make_env, sample_restart_stream, sample_trajectories
from dicelab.rng import stream_key_array


def best_of(fn, repeat):
    out, best = None, np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.array_equal(np.asarray(x), np.asarray(y)) for x, y in zip(a, b))


def cases(scale):
    env = make_env("gridworld:4x4")
    mu = behaviour_policy(env.target, 0.3)
    n_traj = int(2000 * scale)
    n_stream = int(200_000 * scale)
    traj, time_, s, a, r, s2, _ = sample_trajectories(env.mdp, mu, 0, n_traj)
    rho = np.random.default_rng(0).uniform(0.5, 1.5, time_.size)
    feats = np.random.default_rng(1).standard_normal((env.mdp.num_states, 3))
    st = np.random.default_rng(2).integers(0, env.mdp.num_states, n_stream)
    y = np.random.default_rng(3).uniform(0, 1, n_stream)
    scales = np.full(n_stream, 0.3)
    order = np.random.default_rng(4).permutation(s.size)

    def sample(backend):
        return lambda: sample_trajectories(env.mdp, mu, 0, n_traj, backend=backend)

    def stream(backend):
        return lambda: sample_restart_stream(env.mdp, mu, 0, n_stream, backend=backend)

    def rho_prod(backend):
        return lambda: kernels.rho_prod(time_, rho, backend)

    def linear(backend):
        fn = kernels.pick(kernels.linear_dice_updates, backend)

        def run():
            theta = np.zeros(3)
            eta, _ = fn(theta, 0.0, feats, st, y, scales, 0.001, 0.5, 0.1, 0.75, False, 0)
            return theta, np.array([eta])
        return run

    def td(backend):
        fn = kernels.pick(kernels.td_sweep, backend)

        def run():
            q = np.zeros((env.mdp.num_states, env.mdp.num_actions))
            fn(q, np.zeros_like(q), order, s, a, r, s2, env.target.probs, 0.95, 0.5, 0.6)
            return q
        return run

    return [
        (f"sample_trajectories ({n_traj} episodes)", sample),
        (f"restart_stream ({n_stream} steps)", stream),
        (f"rho_prod ({time_.size} records)", rho_prod),
        (f"linear_dice_updates ({n_stream} steps)", linear),
        (f"td_sweep ({s.size} records)", td),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies every problem size")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    stream_key_array(0, np.arange(2))  # warm imports
    print(f"{'kernel':<42} {'numba s':>10} {'numpy s':>10} {'speedup':>8}  equal")
    for name, make in cases(args.scale):
        make("numba")()  # compile outside the timing
        t_jit, out_jit = best_of(make("numba"), args.repeat)
        t_np, out_np = best_of(make("numpy"), args.repeat)
        print(f"{name:<42} {t_jit:>10.4f} {t_np:>10.4f} {t_np / t_jit:>8.1f}  {same(out_jit, out_np)}")


if __name__ == "__main__":
    main()
