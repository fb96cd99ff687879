import json

import pytest

from sourcerer.cli import main

SPEC = {"n_classes": 3, "n_bands": 2, "n_timesteps": 10, "source_polygons_per_class": 3,
        "target_train_polygons_per_class": 3, "target_test_polygons_per_class": 2, "polygon_size_mean": 8,
        "temporal_shift": 2.0}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(SPEC))
    assert main(["gen", "--spec", str(d / "spec.json"), "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data" / "source"), "--out", str(d / "src.json"), "--updates", "10",
                 "--filters", "2", "--fc-units", "4"]) == 0
    return d


def test_gen_writes_three_datasets(workdir):
    for name in ("source", "target_train", "target_test"):
        assert (workdir / "data" / name / "meta.json").exists()


def test_checkpoint_stores_normalization(workdir):
    doc = json.loads((workdir / "src.json").read_text())
    assert doc["bn_frozen"] is True
    assert len(doc["norm_stats"]["p2"]) == 2


@pytest.mark.parametrize("method", ["naive", "finetune", "sourcerer"])
def test_adapt_and_eval(workdir, method, capsys):
    out = workdir / f"{method}.json"
    assert main(["adapt", "--model", str(workdir / "src.json"), "--data", str(workdir / "data" / "target_train"),
                 "--method", method, "--polygons", "2", "--updates", "5", "--out", str(out)]) == 0
    report = workdir / f"{method}_report.json"
    assert main(["eval", "--model", str(out), "--data", str(workdir / "data" / "target_test"),
                 "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert 0 <= rep["accuracy"] <= 1
    assert "accuracy=" in capsys.readouterr().out


@pytest.mark.parametrize("method", ["dann", "mme"])
def test_pooled(workdir, method):
    out = workdir / f"{method}.json"
    assert main(["pooled", "--method", method, "--source", str(workdir / "data" / "source"),
                 "--target", str(workdir / "data" / "target_train"), "--polygons", "2", "--filters", "2",
                 "--fc-units", "4", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["arch"] == method


def test_sweep(workdir):
    cfg = {"spec": SPEC, "methods": ["source-only", "sourcerer"], "schedule": [1, 2], "repeats": 1,
           "grad_updates": 5, "batch_size": 16, "model": {"conv_filters": 2, "fc_units": 4}, "queries": [0, 20]}
    (workdir / "sweep.json").write_text(json.dumps(cfg))
    assert main(["sweep", "--config", str(workdir / "sweep.json"), "--out", str(workdir / "out")]) == 0
    assert (workdir / "out" / "raw_results.csv").exists()
    assert (workdir / "out" / "curves_log.svg").exists()


def test_lambda(capsys):
    assert main(["lambda", "--nt", "1000"]) == 0
    assert capsys.readouterr().out.strip() == "lambda=1.0 k=-3.3333333333333335"
    assert main(["lambda", "--tmax", "1e5", "--nt", "1"]) == 0
    assert capsys.readouterr().out.strip().startswith("lambda=10000000000.0 k=-4.0")


def test_errors_are_one_line(workdir, capsys):
    assert main(["eval", "--model", str(workdir / "missing.json"), "--data", str(workdir / "data" / "source")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")
    assert main(["lambda", "--nt", "0"]) == 1
    assert capsys.readouterr().err.startswith("error: ValueError:")
    with pytest.raises(SystemExit) as exc:
        main(["adapt", "--method", "bogus"])
    assert exc.value.code != 0
