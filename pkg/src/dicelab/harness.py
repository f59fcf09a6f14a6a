"""Config-driven sweeps: datasets x estimators x seeds, scored against exact oracles.

Output layout of ``run_sweep``::

    out_dir/aggregate.csv     one row per (sweep point, estimator setting), seed-averaged
    out_dir/runs.csv          one row per run, final values only
    out_dir/runs/*.csv        per-run curves (step, j_hat, j_true, squared_error, mass, max_ratio_error)
    out_dir/manifest.json     config echo, run index, wall-clock times, selected setting

Everything except the manifest is a pure function of the config.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dicelab import dataset as dsmod
from dicelab import estimators as est
from dicelab.errors import DiceLabError, InputError
from dicelab.features import parse_features
from dicelab.mdp import behaviour_policy, make_env
from dicelab.oracle import compute_report

ESTIMATORS = ("avg-dice", "avg-dice-linear", "td", "cop-td", "avg-reward")
LOG_POINTS = 200
CURVE_COLUMNS = ("step", "j_hat", "j_true", "squared_error", "mass", "max_ratio_error")
RUN_COLUMNS = ("point_id", "estimator", "seed", "status", "j_hat", "j_true", "abs_error",
               "squared_error", "mass", "max_ratio_error", "error")
POINT_COLUMNS = ("point_id", "env", "gamma", "num_traj", "max_len", "dataset_size",
                 "behaviour_eps", "var_scale")
AGGREGATE_COLUMNS = POINT_COLUMNS + (
    "estimator", "params", "lambda1", "lambda2", "lr", "n_runs", "n_failed", "mean_j_hat",
    "j_true", "mean_squared_error", "stderr_squared_error", "mean_max_ratio_error",
)
PLOT_COLUMNS = ("env", "estimator", "step", "mean_log10_mse", "stderr")

# Per-estimator defaults; anything else in an estimator spec is rejected.
ESTIMATOR_DEFAULTS = {
    "avg-dice": {},
    "avg-dice-linear": {"lambda1": est.DEFAULT_LAMBDA1, "lambda2": est.DEFAULT_LAMBDA2,
                        "lr": est.DEFAULT_LR, "epochs": 100, "batch_size": 512,
                        "features": "onehot", "h": "empirical"},
    "td": {"lr": 0.5, "decay": 0.6, "epochs": 50},
    "cop-td": {"lr": 0.5, "decay": 0.6, "epochs": 50, "start_term": "initial"},
    "avg-reward": {},
}

TUNING_GRID = {
    "lambda1": [0.0, 0.001, 0.01, 0.1],
    "lambda2": [0.5, 2.0, 10.0, 20.0],
    "lr": [5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
}


def fmt(x):
    """Shortest round-trip text for a number; blank for NaN or None."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _num(v):
    """Number from a CSV cell or an in-memory value."""
    return float("nan") if v in ("", None) else float(v)


# --------------------------------------------------------------------------
# config

def _as_list(v, name):
    out = list(v) if isinstance(v, (list, tuple)) else [v]
    if not out:
        raise InputError(f"config list {name!r} is empty")
    return out


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    params: dict

    @property
    def label(self):
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={fmt(v)}" for k, v in sorted(self.params.items()))
        return f"{self.name}({inner})"


def expand_estimator(doc) -> list[EstimatorSpec]:
    """One spec per grid point; list-valued hyperparameters span the grid."""
    doc = {"name": doc} if isinstance(doc, str) else dict(doc)
    name = doc.pop("name", None)
    if name not in ESTIMATORS:
        raise InputError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    defaults = ESTIMATOR_DEFAULTS[name]
    unknown = set(doc) - set(defaults)
    if unknown:
        raise InputError(f"{name} does not take {sorted(unknown)}")
    keys = sorted(defaults)
    axes = [_as_list(doc.get(k, defaults[k]), k) for k in keys]
    return [EstimatorSpec(name, dict(zip(keys, combo))) for combo in itertools.product(*axes)]


@dataclass(frozen=True)
class SweepPoint:
    index: int
    env: str
    gamma: float
    num_traj: int | None
    max_len: int
    dataset_size: int | None
    behaviour_eps: float
    var_scale: float

    @property
    def point_id(self):
        parts = [self.env, f"g={fmt(self.gamma)}"]
        if self.num_traj is not None:
            parts.append(f"traj={self.num_traj}")
        parts.append(f"len={self.max_len}")
        if self.dataset_size is not None:
            parts.append(f"size={self.dataset_size}")
        parts.append(f"eps={fmt(self.behaviour_eps)}")
        if self.var_scale != 1.0:
            parts.append(f"vs={fmt(self.var_scale)}")
        return "/".join(parts)

    def columns(self):
        return {"point_id": self.point_id, "env": self.env, "gamma": self.gamma,
                "num_traj": self.num_traj, "max_len": self.max_len,
                "dataset_size": self.dataset_size, "behaviour_eps": self.behaviour_eps,
                "var_scale": self.var_scale}


@dataclass
class ExperimentConfig:
    envs: list
    gammas: list
    max_len: list
    behaviour_eps: list
    estimators: list
    seeds: list
    out_dir: str = "sweep_out"
    num_traj: list | None = None
    dataset_size: list | None = None
    var_scale: list = field(default_factory=lambda: [1.0])
    truncation: str = "include"
    log_points: int = LOG_POINTS

    def __post_init__(self):
        self.envs = _as_list(self.envs, "envs")
        self.gammas = [float(g) for g in _as_list(self.gammas, "gammas")]
        self.max_len = [int(v) for v in _as_list(self.max_len, "max_len")]
        self.behaviour_eps = [float(v) for v in _as_list(self.behaviour_eps, "behaviour_eps")]
        self.var_scale = [float(v) for v in _as_list(self.var_scale, "var_scale")]
        self.seeds = [int(s) for s in _as_list(self.seeds, "seeds")]
        self.estimators = _as_list(self.estimators, "estimators")
        if self.num_traj is not None:
            self.num_traj = [int(v) for v in _as_list(self.num_traj, "num_traj")]
        if self.dataset_size is not None:
            self.dataset_size = [int(v) for v in _as_list(self.dataset_size, "dataset_size")]
        if self.num_traj is None and self.dataset_size is None:
            raise InputError("config needs num_traj or dataset_size")
        if self.num_traj is not None and self.dataset_size is not None:
            made = {k * L for k in self.num_traj for L in self.max_len}
            if made != set(self.dataset_size):
                raise InputError(
                    f"dataset_size {sorted(set(self.dataset_size))} does not match "
                    f"num_traj x max_len {sorted(made)}")
        if any(not 0.0 < g < 1.0 for g in self.gammas):
            raise InputError("every gamma must lie in (0, 1)")
        if self.truncation not in dsmod.TRUNCATION_POLICIES:
            raise InputError(f"truncation must be one of {dsmod.TRUNCATION_POLICIES}")
        if self.log_points < 1:
            raise InputError("log_points must be positive")
        self.estimator_specs()  # validate early

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for short, full in (("env", "envs"), ("gamma", "gammas")):
            if short in doc:
                doc[full] = doc.pop(short)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InputError(f"bad sweep config: {exc}") from None

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def estimator_specs(self) -> list[EstimatorSpec]:
        return [s for doc in self.estimators for s in expand_estimator(doc)]

    def points(self) -> list[SweepPoint]:
        if self.dataset_size is not None and self.num_traj is None:
            sizes = [(None, L, n) for n in self.dataset_size for L in self.max_len]
        elif self.dataset_size is None:
            sizes = [(k, L, None) for k in self.num_traj for L in self.max_len]
        else:
            sizes = [(k, L, k * L) for k in self.num_traj for L in self.max_len]
        combos = itertools.product(self.envs, self.gammas, sizes, self.behaviour_eps, self.var_scale)
        return [SweepPoint(i, env, g, k, L, n, eps, vs)
                for i, (env, g, (k, L, n), eps, vs) in enumerate(combos)]


def tuning_config(out_dir="tuning_out", seeds=tuple(range(10)), env="chain:5", epochs=100):
    """Regularizer/learning-rate grid for linear Average-DICE on one environment (80 settings)."""
    return ExperimentConfig(
        envs=[env], gammas=[0.95], max_len=[100], dataset_size=[4000], behaviour_eps=[0.3],
        estimators=[{"name": "avg-dice-linear", "epochs": epochs, **TUNING_GRID}],
        seeds=list(seeds), out_dir=str(out_dir),
    )


# --------------------------------------------------------------------------
# single evaluation

@dataclass
class Evaluation:
    history: list  # (step, j_hat)
    j_hat: float
    ratio: np.ndarray | None
    mass: float


def resolve_h(h, ds, report):
    if h in (None, "empirical"):
        return None
    if h == "oracle":
        return report.expected_len_mu
    try:
        value = float(h)
    except (TypeError, ValueError):
        raise InputError(f"h must be 'empirical', 'oracle' or a number, got {h!r}") from None
    if not value > 0:
        raise InputError("h must be positive")
    return value


def evaluate(name, params, ds, gamma, target, initial_dist, report=None, seed=0,
             log_points=LOG_POINTS, behaviour=None) -> Evaluation:
    """Run one estimator on one dataset."""
    p = {**ESTIMATOR_DEFAULTS[name], **params}
    if name == "avg-reward":
        j = est.average_reward_baseline(ds)
        return Evaluation([(0, j)], j, None, float("nan"))
    if name == "avg-dice":
        r = est.average_dice(ds, gamma)
    elif name == "avg-dice-linear":
        Phi = parse_features(p["features"], ds.num_states, seed, dsmod.empirical_distribution(ds))
        r = est.batch_linear_dice(ds, Phi, gamma, H=resolve_h(p["h"], ds, report),
                                  lambda1=float(p["lambda1"]), lambda2=float(p["lambda2"]),
                                  lr=float(p["lr"]), epochs=int(p["epochs"]),
                                  batch_size=int(p["batch_size"]), seed=seed, log_points=log_points)
    elif name == "cop-td":
        r = est.cop_td(ds, initial_dist, gamma, lr=float(p["lr"]), decay=float(p["decay"]),
                       epochs=int(p["epochs"]), seed=seed, start_term=p["start_term"],
                       log_points=log_points)
    elif name == "td":
        t = est.off_policy_td(ds, target, initial_dist, gamma, lr=float(p["lr"]),
                              decay=float(p["decay"]), epochs=int(p["epochs"]), seed=seed,
                              log_points=log_points)
        return Evaluation(t.history, t.j_hat, None, float("nan"))
    else:
        raise InputError(f"unknown estimator {name!r}")
    return Evaluation(r.history, r.j_hat, r.ratio, float(r.diagnostics.get("mass", np.nan)))


def curve_rows(ev: Evaluation, j_true, true_ratio=None):
    """Rows of the per-run curve CSV; mass and ratio error are final values on the last row."""
    rows = []
    for step, j in ev.history:
        rows.append({"step": int(step), "j_hat": j, "j_true": j_true,
                     "squared_error": (j - j_true) ** 2, "mass": float("nan"),
                     "max_ratio_error": float("nan")})
    if rows:
        rows[-1]["mass"] = ev.mass
        if ev.ratio is not None and true_ratio is not None:
            rows[-1]["max_ratio_error"] = est.max_relative_error(ev.ratio, true_ratio)
    return rows


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# sweeps

@dataclass
class RunResult:
    point_id: str
    point_index: int
    estimator: str
    estimator_index: int
    params: dict
    seed: int
    series: list  # (step, j_hat, squared_error), step-monotone
    j_hat: float
    j_true: float
    squared_error: float
    max_ratio_error: float
    mass: float
    wall_seconds: float
    status: str = "ok"
    error: str = ""

    @property
    def ok(self):
        return self.status == "ok"


def _worker_count():
    raw = os.environ.get("DICELAB_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise InputError(f"DICELAB_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def _prepare_point(point: SweepPoint):
    env = make_env(point.env, point.gamma)
    behaviour = behaviour_policy(env.target, point.behaviour_eps, point.var_scale)
    report = compute_report(env.mdp, env.target, behaviour, point.gamma)
    return env, behaviour, report


def _run_point_seed(config, point, prepared, specs, seed):
    env, behaviour, report = prepared
    meta = {"env": point.env, "behaviour_eps": point.behaviour_eps, "var_scale": point.var_scale}
    try:
        if point.dataset_size is not None:
            ds = dsmod.generate_by_size(env.mdp, behaviour, env.target, point.dataset_size,
                                        point.max_len, seed, config.truncation, meta)
        else:
            ds = dsmod.generate(env.mdp, behaviour, env.target, point.num_traj, point.max_len,
                                seed, config.truncation, meta)
        ds_error = None
    except DiceLabError as exc:
        ds, ds_error = None, f"dataset: {exc}"
    out = []
    for k, spec in enumerate(specs):
        start = time.perf_counter()
        base = dict(point_id=point.point_id, point_index=point.index, estimator=spec.label,
                    estimator_index=k, params=spec.params, seed=seed, j_true=report.j_pi)
        try:
            if ds_error:
                raise InputError(ds_error)
            ev = evaluate(spec.name, spec.params, ds, point.gamma, env.target,
                          env.mdp.initial_dist, report, seed, config.log_points)
            rows = curve_rows(ev, report.j_pi, report.density_ratio)
            last = rows[-1]
            out.append(RunResult(
                **base, series=[(r["step"], r["j_hat"], r["squared_error"]) for r in rows],
                j_hat=ev.j_hat, squared_error=last["squared_error"],
                max_ratio_error=last["max_ratio_error"], mass=ev.mass,
                wall_seconds=time.perf_counter() - start))
        except (DiceLabError, ArithmeticError, ValueError) as exc:
            nan = float("nan")
            out.append(RunResult(**base, series=[], j_hat=nan, squared_error=nan,
                                 max_ratio_error=nan, mass=nan,
                                 wall_seconds=time.perf_counter() - start,
                                 status="failed", error=f"{type(exc).__name__}: {exc}"))
    return out


def _run_file(r: RunResult):
    return f"runs/p{r.point_index:03d}_e{r.estimator_index:03d}_s{r.seed}.csv"


def aggregate(results, points, specs):
    """Seed-averaged rows in (point, estimator) order."""
    by_key = {}
    for r in results:
        by_key.setdefault((r.point_index, r.estimator_index), []).append(r)
    rows = []
    for p in points:
        for k, spec in enumerate(specs):
            runs = by_key.get((p.index, k), [])
            good = [r for r in runs if r.ok]
            sq = np.array([r.squared_error for r in good])
            nan = float("nan")
            row = p.columns()
            row.update(
                estimator=spec.label, params=json.dumps(spec.params, sort_keys=True),
                lambda1=spec.params.get("lambda1"), lambda2=spec.params.get("lambda2"),
                lr=spec.params.get("lr"), n_runs=len(runs), n_failed=len(runs) - len(good),
                mean_j_hat=float(np.mean([r.j_hat for r in good])) if good else nan,
                j_true=runs[0].j_true if runs else nan,
                mean_squared_error=float(sq.mean()) if good else nan,
                stderr_squared_error=float(sq.std(ddof=1) / np.sqrt(sq.size)) if sq.size > 1 else
                (0.0 if sq.size == 1 else nan),
                mean_max_ratio_error=float(np.mean([r.max_ratio_error for r in good]))
                if good else nan,
            )
            rows.append(row)
    return rows


def run_sweep(config: ExperimentConfig, out_dir=None, threads=None):
    """Run every (point, seed) pair, write the CSVs, and return ``(results, aggregate_rows)``."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = config.points()
    specs = config.estimator_specs()
    wall0 = time.perf_counter()
    prepared = {}
    point_errors = {}
    for p in points:
        try:
            prepared[p.index] = _prepare_point(p)
        except DiceLabError as exc:
            point_errors[p.index] = f"oracle: {type(exc).__name__}: {exc}"

    tasks = [(p, s) for p in points for s in config.seeds if p.index in prepared]
    workers = threads or _worker_count()

    def job(task):
        p, s = task
        return _run_point_seed(config, p, prepared[p.index], specs, s)

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(job, tasks))
    else:
        chunks = [job(t) for t in tasks]
    results = [r for chunk in chunks for r in chunk]
    nan = float("nan")
    for idx, msg in point_errors.items():
        p = points[idx]
        for k, spec in enumerate(specs):
            for s in config.seeds:
                results.append(RunResult(p.point_id, idx, spec.label, k, spec.params, s, [], nan,
                                         nan, nan, nan, nan, 0.0, "failed", msg))
    results.sort(key=lambda r: (r.point_index, r.estimator_index, r.seed))

    for r in results:
        rows = [{"step": st, "j_hat": j, "j_true": r.j_true, "squared_error": e,
                 "mass": nan, "max_ratio_error": nan} for st, j, e in r.series]
        if rows:
            rows[-1].update(mass=r.mass, max_ratio_error=r.max_ratio_error)
        write_csv(out / _run_file(r), CURVE_COLUMNS, rows)
    write_csv(out / "runs.csv", RUN_COLUMNS, [
        {"point_id": r.point_id, "estimator": r.estimator, "seed": r.seed, "status": r.status,
         "j_hat": r.j_hat, "j_true": r.j_true, "abs_error": abs(r.j_hat - r.j_true),
         "squared_error": r.squared_error, "mass": r.mass, "max_ratio_error": r.max_ratio_error,
         "error": r.error} for r in results])
    agg = aggregate(results, points, specs)
    write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, agg)

    manifest = {
        "config": config.to_dict(),
        "threads": workers,
        "wall_seconds": time.perf_counter() - wall0,
        "runs": [{"file": _run_file(r), "point_id": r.point_id, "estimator": r.estimator,
                  "seed": r.seed, "status": r.status, "wall_seconds": r.wall_seconds}
                 for r in results],
    }
    linear = [row for row in agg if row["estimator"].startswith("avg-dice-linear")]
    if linear:
        manifest["selected"] = select_best(linear, "avg-dice-linear")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return results, agg


def load_results(out_dir) -> list[RunResult]:
    """Rebuild curve-level results from a finished sweep directory."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    results = []
    for run in manifest["runs"]:
        rows = read_csv(out / run["file"])
        series = [(int(r["step"]), _num(r["j_hat"]), _num(r["squared_error"])) for r in rows]
        last = rows[-1] if rows else {}
        nan = float("nan")
        results.append(RunResult(
            run["point_id"], -1, run["estimator"], -1, {}, int(run["seed"]), series,
            series[-1][1] if series else nan, _num(last.get("j_true")),
            series[-1][2] if series else nan, _num(last.get("max_ratio_error")),
            _num(last.get("mass")), float(run["wall_seconds"]), run["status"]))
    return results


# --------------------------------------------------------------------------
# selection and plot data

def _label_base(label):
    return label.split("(", 1)[0]


def select_best(rows, estimator="avg-dice-linear"):
    """Setting with the lowest mean final squared error across sweep points.

    ``rows`` is aggregate rows (dicts, as written or read back) or a CSV path.
    Ties go to the smaller lr, then lambda1, then lambda2.
    """
    if isinstance(rows, (str, os.PathLike)):
        rows = read_csv(rows)
    rows = [r for r in rows if _label_base(r["estimator"]) == estimator]
    if not rows:
        raise InputError(f"no aggregate rows for {estimator}")
    groups = {}
    for r in rows:
        groups.setdefault(r["params"], []).append(r)

    def key(item):
        params, grp = item
        errs = [_num(r["mean_squared_error"]) for r in grp]
        score = float(np.mean(errs)) if errs and not any(math.isnan(e) for e in errs) else math.inf
        p = json.loads(params)
        return (score, p.get("lr", 0.0), p.get("lambda1", 0.0), p.get("lambda2", 0.0), params)

    params, grp = min(groups.items(), key=key)
    score = key((params, grp))[0]
    return {"estimator": estimator, "params": json.loads(params),
            "mean_squared_error": score, "points": len(grp)}


def emit_plot_data(results, path, floor=1e-300):
    """Long-format curve summary: mean and standard error of log10 squared error over seeds."""
    groups = {}
    for r in results:
        if r.ok:
            groups.setdefault((r.point_id, r.estimator), []).append(r)
    rows = []
    for (env, label), runs in groups.items():
        by_step = {}
        for r in runs:
            for step, _, sq in r.series:
                by_step.setdefault(step, []).append(math.log10(max(sq, floor)))
        for step in sorted(by_step):
            v = np.array(by_step[step])
            se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
            rows.append({"env": env, "estimator": label, "step": step,
                         "mean_log10_mse": float(v.mean()), "stderr": se})
    write_csv(path, PLOT_COLUMNS, rows)
    return rows
