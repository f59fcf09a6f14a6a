"""Off-policy trajectory datasets: generation, IS annotation, JSONL persistence.

Records are stored column-wise. The discount is deliberately *not* baked into
the records; estimators apply ``gamma ** time`` themselves so one dataset
serves a whole discount sweep.

File format (JSON Lines): a header object on line 1, then one object per
transition with keys ``state, action, reward, next_state, time, rho_step,
rho_prod, traj_id``. ``next_state`` is ``null`` when the episode terminated.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dicelab import kernels
from dicelab.errors import InputError, IntegrityError, ParseError
from dicelab.mdp import DEFAULT_MAX_LEN, TERMINAL, Policy, TabularMdp, sample_trajectories

FORMAT_VERSION = 1
TRUNCATION_POLICIES = ("include", "exclude", "error")
RECORD_KEYS = ("state", "action", "reward", "next_state", "time", "rho_step", "rho_prod", "traj_id")


@dataclass(frozen=True)
class TransitionRecord:
    state: int
    action: int
    reward: float
    next_state: int  # TERMINAL (-1) when the episode ended here
    time: int
    rho_step: float
    rho_prod: float
    traj_id: int

    def to_json(self):
        return {
            "state": self.state,
            "action": self.action,
            "reward": self.reward,
            "next_state": None if self.next_state == TERMINAL else self.next_state,
            "time": self.time,
            "rho_step": self.rho_step,
            "rho_prod": self.rho_prod,
            "traj_id": self.traj_id,
        }


_COLUMNS = (
    ("states", np.int64), ("actions", np.int64), ("rewards", np.float64),
    ("next_states", np.int64), ("times", np.int64), ("rho_step", np.float64),
    ("rho_prod", np.float64), ("traj_ids", np.int64),
)


@dataclass(eq=False)
class TrajectoryDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    times: np.ndarray
    rho_step: np.ndarray
    rho_prod: np.ndarray
    traj_ids: np.ndarray
    num_states: int
    num_actions: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in _COLUMNS:
            a = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            a.setflags(write=False)
            setattr(self, name, a)
        n = self.states.shape[0]
        if any(getattr(self, name).shape != (n,) for name, _ in _COLUMNS):
            raise InputError("dataset columns must be 1-D and equally long")
        self.meta = {**self.meta, "version": FORMAT_VERSION,
                     "num_states": int(self.num_states), "num_actions": int(self.num_actions)}

    @property
    def num_transitions(self):
        return self.states.shape[0]

    def __len__(self):
        return self.num_transitions

    @property
    def num_trajectories(self):
        return int(self.traj_ids[-1]) + 1 if self.num_transitions else 0

    @property
    def completed(self):
        """Per-trajectory flag: True if the episode reached termination (not truncated)."""
        if not self.num_transitions:
            return np.zeros(0, dtype=bool)
        last = np.append(self.traj_ids[1:] != self.traj_ids[:-1], True)
        return self.next_states[last] == TERMINAL

    @property
    def num_completed(self):
        return int(self.completed.sum())

    def record(self, i) -> TransitionRecord:
        return TransitionRecord(int(self.states[i]), int(self.actions[i]), float(self.rewards[i]),
                                int(self.next_states[i]), int(self.times[i]),
                                float(self.rho_step[i]), float(self.rho_prod[i]),
                                int(self.traj_ids[i]))

    @property
    def records(self):
        return [self.record(i) for i in range(self.num_transitions)]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (
            self.num_states == other.num_states
            and self.num_actions == other.num_actions
            and self.meta == other.meta
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c, _ in _COLUMNS)
        )

    @classmethod
    def from_records(cls, records, num_states, num_actions, meta=None, check=True):
        cols = {name: [] for name, _ in _COLUMNS}
        for r in records:
            cols["states"].append(r.state)
            cols["actions"].append(r.action)
            cols["rewards"].append(r.reward)
            cols["next_states"].append(r.next_state)
            cols["times"].append(r.time)
            cols["rho_step"].append(r.rho_step)
            cols["rho_prod"].append(r.rho_prod)
            cols["traj_ids"].append(r.traj_id)
        ds = cls(**cols, num_states=num_states, num_actions=num_actions, meta=dict(meta or {}))
        if check:
            verify(ds)
        return ds


def verify(ds: TrajectoryDataset):
    """Raise :class:`IntegrityError` unless every structural invariant holds."""
    n = ds.num_transitions
    if n == 0:
        return
    s, a, t, tid, s2 = ds.states, ds.actions, ds.times, ds.traj_ids, ds.next_states
    if s.min() < 0 or s.max() >= ds.num_states or a.min() < 0 or a.max() >= ds.num_actions:
        raise IntegrityError("state or action id out of range")
    if s2.min() < TERMINAL or s2.max() >= ds.num_states:
        raise IntegrityError("next_state id out of range")
    if tid[0] != 0 or t[0] != 0:
        raise IntegrityError("first record must open trajectory 0 at time 0")
    step = np.diff(tid)
    if ((step != 0) & (step != 1)).any():
        raise IntegrityError("trajectory ids must be contiguous and ordered")
    new = np.append(True, step == 1)
    if (t[new] != 0).any():
        raise IntegrityError("each trajectory must start at time 0")
    if (t[1:][~new[1:]] != t[:-1][~new[1:]] + 1).any():
        raise IntegrityError("times within a trajectory must be contiguous")
    cont = ~new[1:]
    if (s2[:-1][cont] != s[1:][cont]).any():
        raise IntegrityError("next_state disagrees with the following record's state")
    if (s2[:-1][cont] == TERMINAL).any():
        raise IntegrityError("terminated trajectory continues")
    if not (np.isfinite(ds.rho_step).all() and (ds.rho_step >= 0).all()):
        raise IntegrityError("rho_step must be finite and nonnegative")
    if (ds.rho_prod[new] != 1.0).any():
        raise IntegrityError("rho_prod must be exactly 1 at time 0")
    expect = ds.rho_prod[:-1][cont] * ds.rho_step[:-1][cont]
    got = ds.rho_prod[1:][cont]
    if (np.abs(got - expect) > 1e-12 * np.maximum(np.abs(expect), 1e-300)).any():
        raise IntegrityError("rho_prod breaks the running-product invariant")


def check_support(target: Policy, behaviour: Policy):
    bad = np.argwhere((target.probs > 0) & (behaviour.probs <= 0))
    if bad.size:
        s, a = bad[0]
        raise InputError(f"behaviour gives zero probability to (s={s}, a={a}) which the target uses")


def generate(mdp: TabularMdp, behaviour: Policy, target: Policy, num_trajectories: int,
             max_len: int = DEFAULT_MAX_LEN, seed: int = 0, truncation: str = "include",
             meta=None, backend=None) -> TrajectoryDataset:
    """Sample ``num_trajectories`` behaviour episodes and annotate them for ``target``."""
    if truncation not in TRUNCATION_POLICIES:
        raise InputError(f"truncation must be one of {TRUNCATION_POLICIES}")
    check_support(target, behaviour)
    traj, time, s, a, r, s2, terminated = sample_trajectories(
        mdp, behaviour, seed, num_trajectories, max_len, backend=backend)
    if not terminated.all():
        if truncation == "error":
            raise InputError(f"{int((~terminated).sum())} trajectories hit max_len={max_len}")
        if truncation == "exclude":
            keep = terminated[traj]
            traj, time, s, a, r, s2 = (c[keep] for c in (traj, time, s, a, r, s2))
            traj = np.cumsum(terminated)[traj] - 1
    ratio = np.zeros_like(target.probs)
    np.divide(target.probs, behaviour.probs, out=ratio, where=behaviour.probs > 0)
    rho_step = ratio[s, a]
    header = {
        "version": FORMAT_VERSION,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "seed": int(seed),
        "behaviour_hash": behaviour.digest(),
        "target_hash": target.digest(),
        "max_len": int(max_len),
        "truncation": truncation,
    }
    header.update(meta or {})
    return TrajectoryDataset(s, a, r, s2, time, rho_step, kernels.rho_prod(time, rho_step, backend),
                             traj, mdp.num_states, mdp.num_actions, header)


def generate_by_size(mdp: TabularMdp, behaviour: Policy, target: Policy, num_transitions: int,
                     max_len: int = DEFAULT_MAX_LEN, seed: int = 0, truncation: str = "include",
                     meta=None, backend=None) -> TrajectoryDataset:
    """Sample trajectories 0, 1, 2, ... until ``num_transitions`` records are logged.

    The last trajectory is cut to hit the size exactly and then usually counts
    as incomplete; every trajectory is still capped at ``max_len``.
    """
    if truncation not in TRUNCATION_POLICIES:
        raise InputError(f"truncation must be one of {TRUNCATION_POLICIES}")
    if num_transitions < 1:
        raise InputError("num_transitions must be positive")
    k = max(8, num_transitions // max_len)
    while True:
        ds = generate(mdp, behaviour, target, k, max_len, seed, "include", meta, backend)
        if ds.num_transitions >= num_transitions:
            break
        k *= 2
    cols = {name: getattr(ds, name)[:num_transitions] for name, _ in _COLUMNS}
    cut = TrajectoryDataset(**cols, num_states=ds.num_states, num_actions=ds.num_actions)
    done = cut.completed
    if not done.all():
        if truncation == "error":
            raise InputError(f"{int((~done).sum())} trajectories are incomplete")
        if truncation == "exclude":
            keep = done[cut.traj_ids]
            cols = {name: v[keep] for name, v in cols.items()}
            cols["traj_ids"] = np.cumsum(done)[cols["traj_ids"]] - 1
    header = dict(ds.meta, truncation=truncation, dataset_size=int(num_transitions))
    return TrajectoryDataset(**cols, num_states=ds.num_states, num_actions=ds.num_actions, meta=header)


def save(ds: TrajectoryDataset, path):
    header = dict(ds.meta)
    header.update(version=FORMAT_VERSION, num_states=ds.num_states, num_actions=ds.num_actions)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(ds.num_transitions):
            fh.write(json.dumps(ds.record(i).to_json()) + "\n")


def _int(v, key, line):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{key} must be an integer, got {v!r}", line)
    return v


def _real(v, key, line):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ParseError(f"{key} must be a finite number, got {v!r}", line)
    return float(v)


def load(path) -> TrajectoryDataset:
    records = []
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc.msg}", 1) from None
        if not isinstance(header, dict) or "version" not in header:
            raise ParseError("header must be an object with a version", 1)
        if header["version"] != FORMAT_VERSION:
            raise ParseError(f"unsupported format version {header['version']!r}", 1)
        try:
            num_states = int(header["num_states"])
            num_actions = int(header["num_actions"])
        except (KeyError, TypeError, ValueError):
            raise ParseError("header needs integer num_states and num_actions", 1) from None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, lineno) from None
            if not isinstance(doc, dict) or set(doc) != set(RECORD_KEYS):
                raise ParseError(f"record must have exactly the keys {RECORD_KEYS}", lineno)
            nxt = doc["next_state"]
            records.append(TransitionRecord(
                _int(doc["state"], "state", lineno),
                _int(doc["action"], "action", lineno),
                _real(doc["reward"], "reward", lineno),
                TERMINAL if nxt is None else _int(nxt, "next_state", lineno),
                _int(doc["time"], "time", lineno),
                _real(doc["rho_step"], "rho_step", lineno),
                _real(doc["rho_prod"], "rho_prod", lineno),
                _int(doc["traj_id"], "traj_id", lineno),
            ))
    meta = {k: v for k, v in header.items()}
    return TrajectoryDataset.from_records(records, num_states, num_actions, meta)


def index_by_state(ds: TrajectoryDataset) -> dict:
    """Map each visited state to the positions of its records (unvisited states are absent)."""
    order = np.argsort(ds.states, kind="stable")
    keys, starts = np.unique(ds.states[order], return_index=True)
    bounds = np.append(starts, order.size)
    return {int(k): order[bounds[i]:bounds[i + 1]] for i, k in enumerate(keys)}


def empirical_distribution(ds: TrajectoryDataset) -> np.ndarray:
    """Sampling distribution |I_s| / n over all states."""
    if ds.num_transitions == 0:
        raise InputError("empty dataset")
    return np.bincount(ds.states, minlength=ds.num_states) / ds.num_transitions
