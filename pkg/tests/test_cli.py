import csv
import json

import pytest

from dicelab import dataset as D
from dicelab.cli import main


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.jsonl"
    assert main(["dataset", "gen", "--env", "chain:5", "--behaviour-eps", "0.5",
                 "--num-traj", "200", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_dataset_gen_header(data):
    ds = D.load(data)
    assert ds.num_trajectories == 200
    assert ds.meta["env"] == "chain:5" and ds.meta["behaviour_eps"] == 0.5
    assert ds.meta["var_scale"] == 1.0 and ds.meta["truncation"] == "include"


def test_dataset_gen_size_and_flags(tmp_path):
    out = tmp_path / "s.jsonl"
    assert main(["dataset", "gen", "--env", "loop:8", "--dataset-size", "500", "--max-len", "20",
                 "--var-scale", "2", "--truncation", "exclude", "--out", str(out)]) == 0
    ds = D.load(out)
    assert ds.num_transitions <= 500 and ds.completed.all()
    assert main(["dataset", "gen", "--env", "loop:8", "--out", str(out)]) == 2
    assert main(["dataset", "gen", "--env", "nowhere:3", "--num-traj", "3",
                 "--out", str(out)]) == 2


def test_oracle_compute(tmp_path, capsys):
    out = tmp_path / "o.json"
    assert main(["oracle", "compute", "--env", "gridworld:4x4", "--gamma", "0.9",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["d_mu"]) == 16
    assert main(["oracle", "compute", "--env", "chain:5"]) == 0
    assert json.loads(capsys.readouterr().out)["j_pi"] > 0


@pytest.mark.parametrize("estimator, extra", [
    ("avg-dice", []),
    ("avg-dice-linear", ["--epochs", "3", "--features", "random:3", "--h", "oracle",
                         "--lambda1", "0.01", "--lambda2", "2", "--lr", "0.001",
                         "--batch-size", "64"]),
    ("avg-dice-linear", ["--epochs", "2", "--h", "4.5"]),
    ("td", ["--epochs", "3"]),
    ("cop-td", []),
    ("avg-reward", []),
])
def test_eval_writes_curve(tmp_path, data, estimator, extra):
    out = tmp_path / "curve.csv"
    oracle = tmp_path / "o.json"
    main(["oracle", "compute", "--env", "chain:5", "--behaviour-eps", "0.5", "--out", str(oracle)])
    assert main(["eval", "--estimator", estimator, "--dataset", str(data), "--oracle", str(oracle),
                 "--out", str(out), *extra]) == 0
    rows = list(csv.DictReader(open(out)))
    assert list(rows[0]) == ["step", "j_hat", "j_true", "squared_error", "mass", "max_ratio_error"]
    last = rows[-1]
    assert float(last["squared_error"]) == pytest.approx(
        (float(last["j_hat"]) - float(last["j_true"])) ** 2)


def test_eval_bad_h(data):
    assert main(["eval", "--estimator", "avg-dice-linear", "--dataset", str(data),
                 "--h", "soon"]) == 2


def test_sweep_commands(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "env": "chain:5", "gamma": 0.95, "max_len": 100, "dataset_size": 800,
        "behaviour_eps": 0.3, "seeds": [0, 1],
        "estimators": [{"name": "avg-dice-linear", "epochs": 2, "lr": [0.001, 0.01]}, "avg-dice"]}))
    out = tmp_path / "sw"
    assert main(["sweep", "run", str(cfg), "--out-dir", str(out), "--threads", "2"]) == 0
    capsys.readouterr()
    assert main(["sweep", "select", str(out)]) == 0
    sel = json.loads(capsys.readouterr().out)
    assert sel["params"]["lr"] in (0.001, 0.01)
    assert main(["sweep", "plotdata", str(out)]) == 0
    assert (out / "plot_data.csv").exists()
    assert main(["sweep", "grid", "--seeds", "2"]) == 0
    grid = json.loads(capsys.readouterr().out)
    assert grid["seeds"] == [0, 1] and grid["estimators"][0]["lr"][0] == 5e-5
