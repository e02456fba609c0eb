import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gpkrig.cli import RunConfig, main


def _run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def toy(tmp_path):
    p = tmp_path / "toy.csv"
    assert _run("--seed", 7, "synth", "--toy1d", "--n", 20, "--out", p) == 0
    return p


@pytest.fixture
def holes(tmp_path):
    p = tmp_path / "holes.csv"
    assert _run("--seed", 3, "synth", "--boreholes", "--holes", 30, "--pts", 8,
                "--censor-frac", 0.3, "--out", p) == 0
    return p


def _sites(tmp_path, col="x", values=(0.1, 0.5, 0.9)):
    p = tmp_path / "sites.csv"
    p.write_text(col + "\n" + "\n".join(str(v) for v in values) + "\n")
    return p


def test_end_to_end_pipeline(tmp_path, toy):
    fit = tmp_path / "fit.json"
    assert _run("--seed", 7, "fit", "--data", toy, "--model", "gp", "--out", fit) == 0
    doc = json.loads(fit.read_text())
    assert doc["model"] == "gp" and doc["coords"] == ["x"] and doc["data"]["n"] == 20
    out = tmp_path / "pred.csv"
    assert _run("predict", "--fit", fit, "--sites", _sites(tmp_path), "--out", out) == 0
    rows = _rows(out)
    assert [r["x"] for r in rows] == ["0.10000000000000001", "0.5", "0.90000000000000002"]
    mean = np.array([float(r["mean"]) for r in rows])
    # the toy truth is 2 + 2 sin(4 pi x)
    assert np.all(np.abs(mean - (2 + 2 * np.sin(4 * np.pi * np.array([0.1, 0.5, 0.9])))) < 1.0)
    assert all(float(r["var"]) > 0 for r in rows)


@pytest.mark.parametrize("model", ["subset", "lagp", "slagp", "svecchia"])
def test_other_fit_models_predict(tmp_path, holes, model):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lagp_m": 20, "vecchia_m": 10, "subset_m": 100}))
    fit = tmp_path / "fit.json"
    assert _run("--config", cfg, "--threads", 1, "fit", "--data", holes, "--model", model,
                "--out", fit) == 0
    sites = tmp_path / "s.csv"
    sites.write_text("x,y,z\n0.5,0.5,0.5\n0.2,0.7,0.9\n")
    out = tmp_path / "p.csv"
    assert _run("--threads", 1, "predict", "--fit", fit, "--sites", sites, "--out", out) == 0
    rows = _rows(out)
    assert len(rows) == 2 and all(float(r["var"]) > 0 for r in rows)
    if model in ("lagp", "slagp"):
        assert "error_code" in rows[0]


def test_fingerprint_mismatch_needs_force(tmp_path, toy, capsys):
    fit = tmp_path / "fit.json"
    _run("fit", "--data", toy, "--model", "gp", "--out", fit)
    other = tmp_path / "other.csv"
    _run("--seed", 8, "synth", "--toy1d", "--n", 20, "--out", other)
    out = tmp_path / "p.csv"
    sites = _sites(tmp_path)
    assert _run("predict", "--fit", fit, "--data", other, "--sites", sites, "--out", out) == 2
    assert "fingerprint" in capsys.readouterr().err
    assert _run("predict", "--fit", fit, "--data", other, "--sites", sites, "--out", out,
                "--force") == 0


def test_variogram_outputs(tmp_path, toy):
    out, js = tmp_path / "v.csv", tmp_path / "v.json"
    assert _run("variogram", "--data", toy, "--out", out, "--json", js) == 0
    rows = _rows(out)
    assert set(rows[0]) >= {"bin_center", "gamma_hat", "pair_count"}
    assert json.loads(js.read_text())["coordinates"] == "coded"


def test_cv_is_byte_identical_and_shares_folds(tmp_path, holes):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lagp_m": 20, "vecchia_m": 10, "subset_m": 100}))
    outs = []
    for i in range(2):
        o, c = tmp_path / f"m{i}.json", tmp_path / f"m{i}.csv"
        assert _run("--seed", 1, "--threads", 1, "--config", cfg, "cv", "--data", holes,
                    "--model", "subset,lagp,slagp,svecchia,ok", "--k", 3,
                    "--out", o, "--csv", c) == 0
        outs.append((o.read_bytes(), c.read_bytes()))
    assert outs[0] == outs[1]
    doc = json.loads(outs[0][0])
    assert set(doc["summary"]) == {"subset", "lagp", "slagp", "svecchia", "ok"}
    assert len(doc["folds"]) == 15
    n_test = {}
    for f in doc["folds"]:
        n_test.setdefault(f["fold"], set()).add(f["n_test"])
    assert all(len(v) == 1 for v in n_test.values())


def test_impute_writes_completed_sets(tmp_path, holes):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"M": 2, "vecchia_m": 10}))
    out = tmp_path / "imp.csv"
    sites = tmp_path / "s.csv"
    sites.write_text("x,y,z\n0.5,0.5,0.5\n")
    pred = tmp_path / "pred.csv"
    assert _run("--config", cfg, "impute", "--data", holes, "--engine", "svecchia",
                "--out", out, "--sites", sites, "--pred-out", pred) == 0
    for r in (1, 2):
        rows = _rows(tmp_path / f"imp_{r}.csv")
        for row in rows:
            if row["imputed"] == "1":
                assert float(row["value"]) <= float(row["detection_limit"])
    assert len(_rows(pred)) == 1


def test_repeated_invocations_are_byte_identical(tmp_path, holes):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"M": 2, "lagp_m": 15}))
    sites = tmp_path / "s.csv"
    sites.write_text("x,y,z\n0.5,0.5,0.5\n0.1,0.2,0.3\n")
    blobs = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        d.mkdir()
        _run("--seed", 4, "--threads", 1, "synth", "--boreholes", "--holes", 10, "--pts", 5,
             "--censor-frac", 0.3, "--out", d / "s.csv")
        _run("--seed", 4, "--config", cfg, "--threads", 1, "fit", "--data", holes,
             "--model", "lagp", "--out", d / "f.json")
        _run("--seed", 4, "--threads", 1, "predict", "--fit", d / "f.json", "--sites", sites,
             "--out", d / "p.csv")
        _run("--seed", 4, "--config", cfg, "--threads", 1, "impute", "--data", holes,
             "--engine", "slagp", "--out", d / "i.csv")
        blobs.append([(d / n).read_bytes() for n in ("s.csv", "f.json", "p.csv", "i_1.csv",
                                                     "i_2.csv")])
    assert blobs[0] == blobs[1]


def test_thread_count_does_not_change_predictions(tmp_path, holes):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lagp_m": 15}))
    fit = tmp_path / "f.json"
    _run("--config", cfg, "fit", "--data", holes, "--model", "lagp", "--out", fit)
    sites = tmp_path / "s.csv"
    sites.write_text("x,y,z\n" + "\n".join("0.%d,0.5,0.%d" % (i, 9 - i) for i in range(10)) + "\n")
    _run("--threads", 1, "predict", "--fit", fit, "--sites", sites, "--out", tmp_path / "a.csv")
    _run("--threads", 2, "predict", "--fit", fit, "--sites", sites, "--out", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_error_exits(tmp_path, toy, capsys):
    assert _run("fit", "--data", tmp_path / "missing.csv", "--model", "gp",
                "--out", tmp_path / "f.json") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lagp_mm": 3}))
    assert _run("--config", bad, "cv", "--data", toy, "--out", tmp_path / "m.json") == 2
    assert _run("--threads", 0, "cv", "--data", toy, "--out", tmp_path / "m.json") == 2
    assert _run("impute", "--data", toy, "--out", tmp_path / "i.csv") == 2
    assert "no censored records" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        _run("launch")
    assert e.value.code != 0
    with pytest.raises(SystemExit):
        _run("cv", "--data", toy, "--out", tmp_path / "m.json", "--bogus")


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gpkrig.cli", "nope"], capture_output=True,
                       text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_run_config_defaults_and_validation(tmp_path):
    cfg = RunConfig()
    assert (cfg.lagp_m, cfg.vecchia_m, cfg.M, cfg.K) == (50, 25, 5, 10)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"K": 4, "kernel": "matern32"}))
    assert RunConfig.from_file(p).K == 4
    with pytest.raises(ValueError):
        RunConfig(lagp_m=1)
