import json
import time

import pytest

from fracbam.cli import main
from synthetic import make_tree

TRAIN_ARGS = ["--epochs", "2", "--width", "8", "--reduction-ratio", "4", "--input-size", "32",
              "--quiet"]


@pytest.fixture
def tree(tmp_path):
    # a 32-image fixture tree
    return make_tree(tmp_path / "tree", 16, size=32)


def test_full_pipeline_smoke(tree, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FRACBAM_RESULTS", str(tmp_path / "res"))
    start = time.perf_counter()
    assert main(["prep", str(tree), "--ratios", "0.5,0.25,0.25", "--seed", "4"]) == 0
    manifest = tmp_path / "res" / "manifest.json"
    assert json.loads(manifest.read_text())["counts"] == {"train": 16, "val": 8, "test": 8}
    assert main(["train", str(manifest), "--run-id", "r1"] + TRAIN_ARGS) == 0
    run = tmp_path / "res" / "r1"
    assert main(["eval", str(run / "checkpoint"), str(manifest)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    for avg in ("micro", "binary", "macro"):
        assert set(metrics[avg]) >= {"accuracy", "precision", "recall", "f1"}
    assert metrics["counts"]["total"] == 8
    capsys.readouterr()
    assert main(["report"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "Model TA TF1 TR TP"
    assert (tmp_path / "res" / "comparison.csv").exists()
    assert (run / "curves" / "loss.csv").exists()
    assert time.perf_counter() - start < 60


def test_prep_with_fixed_splits(tree, tmp_path):
    fixed = tmp_path / "fixed.json"
    fixed.write_text(json.dumps({"Fractured/img_000.png": "test"}))
    out = tmp_path / "m.json"
    assert main(["prep", str(tree), "--fixed-splits", str(fixed), "--out", str(out)]) == 0
    entries = {e["path"]: e["split"] for e in json.loads(out.read_text())["entries"]}
    assert entries["Fractured/img_000.png"] == "test"


def test_usage_errors_exit_1(tree, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["prep", str(tree), "--bogus"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["prep", str(tree), "--ratios", "0.5,0.5,0.5", "--out", str(tmp_path / "m")]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["prep", str(tmp_path / "missing")]) == 2
    assert "Fractured" in capsys.readouterr().err
    assert main(["report", str(tmp_path)]) == 2


def test_eval_channel_mismatch_exit_2(tree, tmp_path, capsys):
    res = tmp_path / "res"
    m3, m1 = tmp_path / "m3.json", tmp_path / "m1.json"
    assert main(["prep", str(tree), "--ratios", "0.5,0.25,0.25", "--out", str(m3)]) == 0
    assert main(["prep", str(tree), "--ratios", "0.5,0.25,0.25", "--out", str(m1),
                 "--channels", "1"]) == 0
    assert main(["train", str(m3), "--results", str(res), "--epochs", "1"] + TRAIN_ARGS[2:]) == 0
    capsys.readouterr()
    assert main(["eval", str(res / "run" / "checkpoint"), str(m1)]) == 2
    assert "channel" in capsys.readouterr().err


def test_gradcheck_layers(capsys):
    assert main(["gradcheck", "--skip-model"]) == 0
    out = capsys.readouterr().out
    assert "bam_refine train" in out and "max relative error" in out
