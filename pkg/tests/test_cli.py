import csv
import json

import numpy as np
import pytest

from flashjm import cli
from flashjm.data import SolverError

SIM = {"n": 120, "high_risk_count": 48, "seed": 3}
MODEL = {"K": 2, "max_iter": 30, "zeta1": 0.01, "zeta2": 0.01,
         "catalog": ["mean", "last_value", "max"]}


def write_config(path, **sections):
    cfg = {"simulation": dict(SIM), "model": dict(MODEL)}
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    config = write_config(d / "config.json")
    assert cli.run(["simulate", "--config", config, "--out", str(d / "data")]) == 0
    assert cli.run(["fit", "--config", config, "--data", str(d / "data"),
                    "--out", str(d / "fit")]) == 0
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_outputs(workdir):
    d = workdir / "data"
    for name in ("subjects.csv", "longitudinal.csv", "manifest.json", "ground_truth.json"):
        assert (d / name).is_file()
    truth = json.loads((d / "ground_truth.json").read_text())
    assert truth["xi_support"] == [0, 1, 2, 3, 4] and truth["config"]["n"] == 120
    assert len(read_rows(d / "subjects.csv")) == 120


def test_fit_model_file(workdir):
    m = json.loads((workdir / "fit" / "model.json").read_text())
    trace = m["trace"]
    assert all(b <= a + 1e-8 * abs(a) for a, b in zip(trace, trace[1:]))
    rep = m["report"]
    assert set(rep["xi"]) == {f"x_{j}" for j in range(10)}
    assert set(rep["gamma_block_norms"]) == {f"marker_{l}" for l in range(5)}
    assert rep["high_risk_class"] in (0, 1)


def test_predict_at_event_time_reproduces_posterior(workdir, tmp_path):
    model = str(workdir / "fit" / "model.json")
    assert cli.run(["predict", "--model", model, "--data", str(workdir / "data"),
                    "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "predictions.csv")
    m = json.loads((workdir / "fit" / "model.json").read_text())
    pi = np.array(m["posterior"]["pi_tilde"])
    delta = {r["id"]: r["delta"] for r in read_rows(workdir / "data" / "subjects.csv")}
    idx = {sid: i for i, sid in enumerate(m["subject_ids"])}
    checked = 0
    for r in rows:
        if delta[r["id"]] in ("0", "False", "false"):
            probs = np.array([float(r["class_0"]), float(r["class_1"])])
            np.testing.assert_allclose(probs, pi[idx[r["id"]]], atol=1e-10)
            checked += 1
    assert checked > 0


def test_predict_at_landmark_and_fixed_time(workdir, tmp_path):
    model = str(workdir / "fit" / "model.json")
    base = ["predict", "--model", model, "--data", str(workdir / "data")]
    assert cli.run(base + ["--out", str(tmp_path / "a"), "--set", "predict.at=\"landmark\""]) == 0
    assert cli.run(base + ["--out", str(tmp_path / "b"), "--set", "predict.at=2.5"]) == 0
    rows = read_rows(tmp_path / "b" / "predictions.csv")
    assert all(float(r["s"]) == 2.5 for r in rows)
    for r in rows:
        assert abs(float(r["class_0"]) + float(r["class_1"]) - 1.0) < 1e-12
    assert cli.run(base + ["--out", str(tmp_path / "c"), "--set", "predict.at=\"never\""]) == 1


def test_evaluate(workdir, tmp_path):
    assert cli.run(["evaluate", "--model", str(workdir / "fit" / "model.json"),
                    "--data", str(workdir / "data"), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert 0.0 <= rep["c_index"] <= 1.0
    assert len(read_rows(tmp_path / "evaluation.csv")) == 120


def test_screen(workdir, tmp_path):
    config = write_config(tmp_path / "c.json", screen={"keep": 2})
    assert cli.run(["screen", "--config", config, "--data", str(workdir / "data"),
                    "--out", str(tmp_path)]) == 0
    out = json.loads((tmp_path / "screening.json").read_text())
    assert len(out["selected"]) == 2 and set(out["selected"]) <= set(MODEL["catalog"])


def test_select_k(workdir, tmp_path):
    config = write_config(tmp_path / "c.json", select_k={"candidates": [1, 2]})
    assert cli.run(["select-k", "--config", config, "--data", str(workdir / "data"),
                    "--out", str(tmp_path), "--set", "model.max_iter=10"]) == 0
    out = json.loads((tmp_path / "select_k.json").read_text())
    assert out["K"] in (1, 2) and set(out["bic"]) == {"1", "2"}


def test_bootstrap(workdir, tmp_path):
    config = write_config(tmp_path / "c.json", bootstrap={"B": 2, "seed": 1})
    assert cli.run(["bootstrap-se", "--config", config, "--data", str(workdir / "data"),
                    "--model", str(workdir / "fit" / "model.json"), "--out", str(tmp_path)]) == 0
    out = json.loads((tmp_path / "bootstrap.json").read_text())
    assert out["B"] == 2 and out["coefficients"]
    assert all(r["se"] is None or r["se"] >= 0 for r in out["coefficients"])


def test_set_override(tmp_path):
    config = write_config(tmp_path / "c.json")
    assert cli.run(["simulate", "--config", config, "--out", str(tmp_path / "d"),
                    "--set", "simulation.n=60", "--set", "simulation.high_risk_count=20"]) == 0
    truth = json.loads((tmp_path / "d" / "ground_truth.json").read_text())
    assert truth["config"]["n"] == 60 and len(truth["high_risk_subjects"]) == 20


def test_invalid_input_exit_one(tmp_path, capsys):
    config = write_config(tmp_path / "c.json")
    out = str(tmp_path / "o")
    assert cli.run(["simulate", "--config", config, "--out", out, "--bogus"]) == 1
    assert cli.run(["nonsense"]) == 1
    assert cli.run(["simulate", "--out", out]) == 1
    assert cli.run(["simulate", "--config", str(tmp_path / "missing.json"), "--out", out]) == 1
    assert cli.run(["simulate", "--config", config, "--out", out, "--set", "nosection.x=1"]) == 1
    assert cli.run(["simulate", "--config", config, "--out", out, "--set", "simulation.link=\"x\""]) == 1
    assert cli.run(["simulate", "--config", config, "--out", out, "--set", "simulation.zzz=1"]) == 1
    assert cli.run(["fit", "--config", config, "--out", out]) == 1
    assert cli.run(["simulate", "--config", config, "--out", out, "--threads", "0"]) == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.run(["simulate", "--config", str(tmp_path / "bad.json"), "--out", out]) == 1
    assert "error" in capsys.readouterr().err


def test_solver_failure_exit_two(workdir, tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        raise SolverError("forced")
    monkeypatch.setattr(cli, "fit", failing)
    config = write_config(tmp_path / "c.json")
    assert cli.run(["fit", "--config", config, "--data", str(workdir / "data"),
                    "--out", str(tmp_path)]) == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.run(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("flashjm ")


def test_outputs_byte_identical_across_runs_and_threads(tmp_path):
    config = write_config(tmp_path / "c.json",
                          cv={"enabled": True, "grid": [0.01, 0.1], "n_folds": 2, "seed": 0})
    outputs = []
    for run_id, threads in enumerate((1, 1, 2)):
        root = tmp_path / f"r{run_id}"
        assert cli.run(["simulate", "--config", config, "--out", str(root / "data")]) == 0
        assert cli.run(["fit", "--config", config, "--data", str(root / "data"),
                        "--out", str(root / "fit"), "--threads", str(threads),
                        "--set", "model.max_iter=10"]) == 0
        assert cli.run(["evaluate", "--model", str(root / "fit" / "model.json"),
                        "--data", str(root / "data"), "--out", str(root / "eval")]) == 0
        outputs.append([(root / p).read_bytes() for p in
                        ("data/subjects.csv", "data/longitudinal.csv", "fit/model.json",
                         "fit/cv.json", "eval/report.json", "eval/evaluation.csv")])
    assert outputs[0] == outputs[1] == outputs[2]
