import csv
import json
import math
import shutil
import subprocess
import sys
from importlib import resources

import jsonschema
import pytest

from rtdnet.cli import EXIT_ERROR, EXIT_OK, EXIT_USAGE, main
from rtdnet.experiments import SynthSpec, generate_synthetic

SUBCOMMANDS = ["fit", "rank", "train", "predict", "experiment", "synth"]
FAST_TRAIN = ["--max-epochs", "3", "--n-trees", "5"]


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec("LOG", n_instances=40, n_features=3, k_observations=20, seed=3)).write(out)
    return out


def test_fit_exp(tmp_path, capsys):
    rt = tmp_path / "r.csv"
    rt.write_text("instance,seed,runtime\na,0,1\na,1,2\na,2,3\nb,0,5\nb,1,7\n")
    code, out, _ = _run(["fit", "--runtimes", rt, "--family", "EXP"], capsys)
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["fits"][0]["params"] == {"family": "EXP", "theta": [2.0]}
    assert doc["run_config"]["family"] == "EXP"
    code, out, _ = _run(["fit", "--runtimes", rt, "--family", "EXP", "--instance", "b"], capsys)
    fits = json.loads(out)["fits"]
    assert [f["instance"] for f in fits] == ["b"] and fits[0]["k"] == 2
    assert fits[0]["params"]["theta"] == [6.0]


def test_fit_records_failures(tmp_path, capsys):
    rt = tmp_path / "r.csv"
    rt.write_text("instance,seed,runtime\na,0,1\nb,0,2\nb,1,3\n")
    code, out, _ = _run(["fit", "--runtimes", rt, "--family", "LOG"], capsys)
    doc = json.loads(out)
    assert code == EXIT_OK
    assert [f["instance"] for f in doc["failed"]] == ["a"]


def test_fit_unknown_family_is_usage_error(tmp_path, capsys):
    rt = tmp_path / "r.csv"
    rt.write_text("instance,seed,runtime\na,0,1\n")
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--runtimes", str(rt), "--family", "GAMMA"])
    assert exc.value.code == EXIT_USAGE


def test_missing_file_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    code, _, err = _run(["rank", "--features", missing, "--runtimes", missing], capsys)
    assert code == EXIT_ERROR
    assert str(missing) in err


def test_bad_data_is_runtime_error(tmp_path, capsys):
    rt = tmp_path / "r.csv"
    rt.write_text("instance,seed,runtime\na,0,-1\n")
    code, _, err = _run(["fit", "--runtimes", rt, "--family", "EXP"], capsys)
    assert code == EXIT_ERROR and "row 2" in err


def test_rank_alpha_monotone(synth_dir, tmp_path, capsys):
    pcts = {}
    for alpha in ("0.01", "0.5"):
        out = tmp_path / alpha
        code, stdout, err = _run(["rank", "--features", synth_dir / "features.csv", "--runtimes",
                                  synth_dir / "runtimes.csv", "--alpha", alpha, "--out", out], capsys)
        assert code == EXIT_OK
        assert "effective config" in err
        doc = json.loads((out / "ranking.json").read_text())
        assert doc["run_config"]["alpha"] == float(alpha)
        pcts[alpha] = {r["family"]: r["ks_rejection_pct"] for r in doc["ranking"]}
    assert all(pcts["0.5"][f] >= pcts["0.01"][f] for f in pcts["0.01"])
    assert sum(pcts["0.5"].values()) > sum(pcts["0.01"].values())


def test_rank_synthetic_log_first(tmp_path, capsys):
    data = generate_synthetic(SynthSpec("LOG", n_instances=300, n_features=3, k_observations=100, seed=1))
    data.write(tmp_path)
    code, stdout, _ = _run(["rank", "--features", tmp_path / "features.csv", "--runtimes",
                            tmp_path / "runtimes.csv", "--out", tmp_path / "rank"], capsys)
    assert code == EXIT_OK and json.loads(stdout)[0]["family"] == "LOG"


def test_output_dir_env(synth_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RTDNET_OUTPUT_DIR", str(tmp_path / "env"))
    code, _, _ = _run(["rank", "--features", synth_dir / "features.csv", "--runtimes",
                       synth_dir / "runtimes.csv", "--families", "EXP"], capsys)
    assert code == EXIT_OK
    assert (tmp_path / "env" / "rank" / "ranking.csv").exists()


@pytest.mark.parametrize("model", ["distnet", "mrf", "irf"])
def test_train_then_predict_without_training_data(synth_dir, tmp_path, capsys, model):
    work = tmp_path / "work"
    shutil.copytree(synth_dir, work)
    model_path = tmp_path / "model.json"
    code, out, _ = _run(["train", "--features", work / "features.csv", "--runtimes", work / "runtimes.csv",
                         "--family", "LOG", "--model", model, "--out", model_path, *FAST_TRAIN], capsys)
    assert code == EXIT_OK and json.loads(out)["model"] == model
    doc = json.loads(model_path.read_text())
    assert doc["run_config"]["seed"] == 0
    feats = tmp_path / "features.csv"
    shutil.copy(work / "features.csv", feats)
    shutil.rmtree(work)
    pred = tmp_path / "pred.csv"
    code, _, _ = _run(["predict", "--model", model_path, "--features", feats, "--quantiles", "0.5,0.9",
                       "--out", pred], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(pred.open()))
    assert len(rows) == 40
    assert list(rows[0]) == ["instance", "s", "sigma", "q50", "q90"]
    for r in rows:
        # median of LOG is s
        assert float(r["q50"]) == pytest.approx(float(r["s"]), rel=1e-12)
    assert json.loads((tmp_path / "pred.csv.config.json").read_text())["command"] == "predict"


def test_predict_exp_median(tmp_path, capsys):
    data = generate_synthetic(SynthSpec("EXP", n_instances=20, n_features=2, k_observations=10, seed=0))
    data.write(tmp_path)
    model = tmp_path / "m.json"
    _run(["train", "--features", tmp_path / "features.csv", "--runtimes", tmp_path / "runtimes.csv",
          "--family", "EXP", "--model", "mrf", "--out", model, "--n-trees", "3"], capsys)
    code, out, _ = _run(["predict", "--model", model, "--features", tmp_path / "features.csv",
                         "--quantiles", "0.5"], capsys)
    rows = list(csv.DictReader(out.splitlines()))
    assert len(rows) == 20
    for r in rows:
        assert float(r["q50"]) == pytest.approx(float(r["beta"]) * math.log(2), rel=1e-12)


def test_predict_feature_mismatch(synth_dir, tmp_path, capsys):
    model = tmp_path / "m.json"
    _run(["train", "--features", synth_dir / "features.csv", "--runtimes", synth_dir / "runtimes.csv",
          "--family", "LOG", "--model", "mrf", "--out", model, "--n-trees", "2"], capsys)
    bad = tmp_path / "bad.csv"
    bad.write_text("instance,a\nx,1.0\n")
    code, _, err = _run(["predict", "--model", model, "--features", bad], capsys)
    assert code == EXIT_ERROR and "expects 3 features" in err


def test_train_forest_on_single_observations_warns(tmp_path, capsys):
    data = generate_synthetic(SynthSpec("LOG", n_instances=10, n_features=2, k_observations=2, seed=0))
    data.write(tmp_path)
    rt = tmp_path / "runtimes.csv"
    lines = rt.read_text().splitlines()
    # drop the second observation of the first three instances
    keep = [lines[0]] + [ln for ln in lines[1:] if not any(ln.startswith(f"inst{i}") and ",1," in ln
                                                            for i in range(3))]
    rt.write_text("\n".join(keep) + "\n")
    code, out, err = _run(["train", "--features", tmp_path / "features.csv", "--runtimes", rt,
                           "--family", "LOG", "--model", "mrf", "--out", tmp_path / "m.json",
                           "--n-trees", "2"], capsys)
    summary = json.loads(out)
    assert code == EXIT_OK
    assert summary["warnings"] == 3
    assert summary["excluded"] == ["inst0", "inst1", "inst2"]
    assert err.count("warning: instance") == 3


def test_train_deterministic_byte_identical(synth_dir, tmp_path, capsys):
    path = tmp_path / "m.json"
    argv = ["train", "--features", synth_dir / "features.csv", "--runtimes", synth_dir / "runtimes.csv",
            "--family", "LOG", "--out", path, "--deterministic", "--seed", "7", *FAST_TRAIN]
    _run(argv, capsys)
    first = path.read_bytes()
    _run(argv, capsys)
    assert path.read_bytes() == first


def test_synth_then_experiment(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, _ = _run(["synth", "--out", out, "--n-instances", "30", "--n-features", "3",
                       "--k-observations", "12", "--seed", "4"], capsys)
    assert code == EXIT_OK
    assert (out / "truth.json").exists() and (out / "run_config.json").exists()
    schema = json.loads(resources.files("rtdnet").joinpath("schemas/report.schema.json").read_text())
    for q, extra in [(1, []), (2, ["--folds", "3"]), (3, ["--folds", "2", "--k-grid", "4,12",
                                                          "--repetitions", "1"])]:
        rep = tmp_path / f"q{q}"
        code, _, err = _run(["experiment", "--q", q, "--config", out / "experiment.json", "--out", rep,
                             "--max-epochs", "2", "--deterministic", *extra], capsys)
        assert code == EXIT_OK, err
        report = json.loads((rep / "report.json").read_text())
        jsonschema.validate(report, schema)
        assert report["config"]["data"]["features"].endswith("features.csv")


def test_experiment_bundled_small_config_parses(tmp_path, capsys):
    code, _, err = _run(["experiment", "--q", 1, "--config", "small", "--out", tmp_path], capsys)
    assert code == EXIT_OK, err
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["synth"]["n_instances"] == 400


def test_experiment_deterministic_reports(tmp_path, capsys):
    argv = ["experiment", "--q", 2, "--config", "small", "--out", tmp_path, "--folds", "2",
            "--models", "fitted,mrf,distnet", "--max-epochs", "2", "--deterministic", "--jobs", "1"]
    _run(argv, capsys)
    first = (tmp_path / "report.json").read_bytes()
    table = (tmp_path / "table_models.csv").read_bytes()
    _run(argv, capsys)
    assert (tmp_path / "report.json").read_bytes() == first
    assert (tmp_path / "table_models.csv").read_bytes() == table


def test_experiment_usage_errors(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"question": 1, "colour": "red"}))
    code, _, err = _run(["experiment", "--config", cfg], capsys)
    assert code == EXIT_USAGE and "colour" in err
    code, _, _ = _run(["experiment"], capsys)
    assert code == EXIT_USAGE
    code, _, err = _run(["experiment", "--q", 1, "--config", tmp_path / "missing.json"], capsys)
    assert code == EXIT_ERROR and "missing.json" in err


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_for_every_subcommand(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    assert "usage: rtdnet " + sub in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rtdnet.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("rtdnet ")
    res = subprocess.run([sys.executable, "-m", "rtdnet.cli", "fit"], capture_output=True, text=True)
    assert res.returncode == EXIT_USAGE
