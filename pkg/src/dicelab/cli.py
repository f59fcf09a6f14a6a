"""Command line entry point: ``dicelab <group> <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from dicelab import dataset as dsmod
from dicelab import harness
from dicelab.errors import DiceLabError, InputError
from dicelab.mdp import BUILTIN_ENVS, behaviour_policy, make_env
from dicelab.oracle import OracleReport, compute_report


def _policies(env_spec, eps, var_scale, gamma):
    env = make_env(env_spec, gamma)
    return env, behaviour_policy(env.target, eps, var_scale)


def cmd_dataset_gen(a):
    env, mu = _policies(a.env, a.behaviour_eps, a.var_scale, a.gamma)
    meta = {"env": a.env, "behaviour_eps": a.behaviour_eps, "var_scale": a.var_scale}
    if (a.num_traj is None) == (a.dataset_size is None):
        raise InputError("give exactly one of --num-traj and --dataset-size")
    if a.num_traj is not None:
        ds = dsmod.generate(env.mdp, mu, env.target, a.num_traj, a.max_len, a.seed,
                            a.truncation, meta)
    else:
        ds = dsmod.generate_by_size(env.mdp, mu, env.target, a.dataset_size, a.max_len, a.seed,
                                    a.truncation, meta)
    dsmod.save(ds, a.out)
    print(f"wrote {ds.num_transitions} transitions from {ds.num_trajectories} trajectories "
          f"({ds.num_completed} completed) to {a.out}", file=sys.stderr)


def cmd_oracle_compute(a):
    env, mu = _policies(a.env, a.behaviour_eps, a.var_scale, a.gamma)
    report = compute_report(env.mdp, env.target, mu, a.gamma)
    text = json.dumps(report.to_dict(), indent=1)
    if a.out:
        Path(a.out).write_text(text)
    else:
        print(text)


def cmd_eval(a):
    ds = dsmod.load(a.dataset)
    env_spec = a.env or ds.meta.get("env")
    if env_spec is None:
        raise InputError("dataset header has no 'env'; pass --env")
    eps = ds.meta.get("behaviour_eps", a.behaviour_eps)
    var_scale = ds.meta.get("var_scale", 1.0)
    env, mu = _policies(env_spec, eps, var_scale, a.gamma)
    if a.oracle:
        report = OracleReport.load(a.oracle)
    else:
        report = compute_report(env.mdp, env.target, mu, a.gamma)
    params = {}
    if a.estimator == "avg-dice-linear":
        params = {"lambda1": a.lambda1, "lambda2": a.lambda2, "lr": a.lr, "epochs": a.epochs,
                  "batch_size": a.batch_size, "features": a.features, "h": a.h}
    elif a.estimator in ("td", "cop-td"):
        params = {"lr": a.lr if a.lr is not None else 0.5,
                  "epochs": a.epochs if a.epochs is not None else 50}
    params = {k: v for k, v in params.items() if v is not None}
    ev = harness.evaluate(a.estimator, params, ds, a.gamma, env.target, env.mdp.initial_dist,
                          report, a.seed)
    rows = harness.curve_rows(ev, report.j_pi, report.density_ratio)
    if a.out:
        harness.write_csv(a.out, harness.CURVE_COLUMNS, rows)
    last = rows[-1]
    print(f"{a.estimator}: j_hat={ev.j_hat:.6g} j_true={report.j_pi:.6g} "
          f"squared_error={last['squared_error']:.3g}", file=sys.stderr)
    if not a.out:
        print(harness.fmt(ev.j_hat))


def cmd_sweep_run(a):
    config = harness.ExperimentConfig.load(a.config)
    out = a.out_dir or config.out_dir
    results, agg = harness.run_sweep(config, out, a.threads)
    failed = sum(not r.ok for r in results)
    print(f"{len(results)} runs ({failed} failed), {len(agg)} aggregate rows -> {out}",
          file=sys.stderr)


def cmd_sweep_select(a):
    path = Path(a.aggregate)
    if path.is_dir():
        path = path / "aggregate.csv"
    print(json.dumps(harness.select_best(path, a.estimator), indent=1, sort_keys=True))


def cmd_sweep_plotdata(a):
    out = a.out or str(Path(a.sweep_dir) / "plot_data.csv")
    rows = harness.emit_plot_data(harness.load_results(a.sweep_dir), out)
    print(f"{len(rows)} plot rows -> {out}", file=sys.stderr)


def cmd_sweep_grid(a):
    cfg = harness.tuning_config(a.out_dir, range(a.seeds), a.env, a.epochs)
    print(json.dumps(cfg.to_dict(), indent=1))


def _env_args(p, gamma_default=0.95):
    p.add_argument("--env", required=True,
                   help=f"built-in ({', '.join(BUILTIN_ENVS)}, any chain:N / loop:N / "
                        "gridworld:WxH) or a JSON environment file")
    p.add_argument("--behaviour-eps", type=float, default=0.3,
                   help="weight of the uniform policy in the behaviour mixture")
    p.add_argument("--var-scale", type=float, default=1.0,
                   help="behaviour tempering exponent; values above 1 flatten the policy")
    p.add_argument("--gamma", type=float, default=gamma_default)


def build_parser():
    parser = argparse.ArgumentParser(prog="dicelab", description=__doc__)
    groups = parser.add_subparsers(dest="group", required=True)

    data = groups.add_parser("dataset", help="behaviour datasets").add_subparsers(
        dest="command", required=True)
    gen = data.add_parser("gen", help="sample a JSONL dataset")
    _env_args(gen)
    gen.add_argument("--num-traj", type=int)
    gen.add_argument("--dataset-size", type=int,
                     help="sample until this many transitions (last trajectory is cut)")
    gen.add_argument("--max-len", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--truncation", choices=dsmod.TRUNCATION_POLICIES, default="include")
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=cmd_dataset_gen)

    oracle = groups.add_parser("oracle", help="exact ground truth").add_subparsers(
        dest="command", required=True)
    comp = oracle.add_parser("compute", help="write an oracle report as JSON")
    _env_args(comp)
    comp.add_argument("--out")
    comp.set_defaults(fn=cmd_oracle_compute)

    ev = groups.add_parser("eval", help="run one estimator on a dataset")
    ev.add_argument("--estimator", choices=harness.ESTIMATORS, required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--oracle", help="precomputed oracle JSON; computed from the env otherwise")
    ev.add_argument("--env", help="overrides the env recorded in the dataset header")
    ev.add_argument("--behaviour-eps", type=float, default=0.3,
                    help="used only when the dataset header lacks it")
    ev.add_argument("--gamma", type=float, default=0.95)
    ev.add_argument("--lambda1", type=float)
    ev.add_argument("--lambda2", type=float)
    ev.add_argument("--lr", type=float)
    ev.add_argument("--epochs", type=int)
    ev.add_argument("--batch-size", type=int)
    ev.add_argument("--features", help="onehot or random:d")
    ev.add_argument("--h", help="empirical, oracle, or a positive number")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="curve CSV; prints the final estimate when omitted")
    ev.set_defaults(fn=cmd_eval)

    sweep = groups.add_parser("sweep", help="config-driven experiments").add_subparsers(
        dest="command", required=True)
    run = sweep.add_parser("run", help="run a sweep config")
    run.add_argument("config")
    run.add_argument("--out-dir")
    run.add_argument("--threads", type=int, help="worker count (default DICELAB_THREADS or all cores)")
    run.set_defaults(fn=cmd_sweep_run)
    sel = sweep.add_parser("select", help="best setting from an aggregate CSV or sweep dir")
    sel.add_argument("aggregate")
    sel.add_argument("--estimator", default="avg-dice-linear")
    sel.set_defaults(fn=cmd_sweep_select)
    plot = sweep.add_parser("plotdata", help="long-format log10 MSE curves")
    plot.add_argument("sweep_dir")
    plot.add_argument("--out")
    plot.set_defaults(fn=cmd_sweep_plotdata)
    grid = sweep.add_parser("grid", help="print the default tuning-grid config")
    grid.add_argument("--env", default="chain:5")
    grid.add_argument("--seeds", type=int, default=10)
    grid.add_argument("--epochs", type=int, default=100)
    grid.add_argument("--out-dir", default="tuning_out")
    grid.set_defaults(fn=cmd_sweep_grid)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (DiceLabError, OSError) as exc:
        print(f"dicelab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
