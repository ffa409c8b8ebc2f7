import json

import numpy as np
import pytest

from ctxshift.cli import EXIT_TOLERANCE, EXIT_USAGE, main, write_pgm
from ctxshift.recipes import Check
from ctxshift.sources import SourceMissingError, load_source


@pytest.fixture(scope="module")
def have_mnist():
    try:
        load_source("mnist", "test")
    except SourceMissingError as exc:
        pytest.skip(str(exc))


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["reproduce", "table9"])
    assert exc.value.code == EXIT_USAGE
    assert "table1, figure5, table2_cifar100_100" in capsys.readouterr().err.replace("'", "")
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_unknown_config_keys(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.bogus = 1\nwhat = 2\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE
    assert "train.bogus, what" in capsys.readouterr().err


def test_missing_source_is_actionable(tmp_path, capsys):
    assert main(["--root", str(tmp_path), "build-dataset", "--name", "mnist-lt"]) == EXIT_USAGE
    assert "stage_sources.py" in capsys.readouterr().err


def test_not_a_run_dir(tmp_path):
    assert main(["eval", str(tmp_path)]) == EXIT_USAGE


def test_reproduce_exit_codes(monkeypatch, tmp_path):
    import ctxshift.recipes as recipes

    monkeypatch.setattr(recipes, "reproduce", lambda t, s, r: ([Check("a", True, "")], "report"))
    assert main(["reproduce", "table1", "--output", str(tmp_path)]) == 0
    monkeypatch.setattr(recipes, "reproduce", lambda t, s, r: ([Check("a", False, "x")], "report"))
    assert main(["reproduce", "table1", "--output", str(tmp_path)]) == EXIT_TOLERANCE
    runs = sorted(tmp_path.iterdir())
    assert len(runs) == 2
    summary = json.loads((runs[1] / "summary.json").read_text())
    assert summary["target"] == "table1" and "checks" in summary


def test_pgm(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0, 255], [128, 1]], np.uint8))
    data = (tmp_path / "a.pgm").read_bytes()
    assert data == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 1])


def test_build_dataset_cache_hit(have_mnist, capsys):
    args = ["build-dataset", "--name", "mnist-lt", "--rho", "100", "--seed", "0"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    second = capsys.readouterr().out
    assert second.startswith("cache hit")
    assert "[5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]" in second
    sha = [l for l in first.splitlines() if "sha256" in l]
    assert sha == [l for l in second.splitlines() if "sha256" in l]


def test_build_balanced(have_mnist, capsys):
    assert main(["build-dataset", "--name", "mnist-lt", "--rho", "1"]) == 0
    assert "[5000, 5000, 5000, 5000, 5000, 5000, 5000, 5000, 5000, 5000]" in capsys.readouterr().out


@pytest.mark.slow
def test_train_eval_export(have_mnist, tmp_path, capsys):
    common = ["train", "--dataset", "mnist-lt", "--method", "CSA", "--output", str(tmp_path),
              "--set", "train.epochs=3", "--set", "train.crt_epochs=1"]
    assert main(common + ["--seed", "0"]) == 0
    assert main(common + ["--seed", "1"]) == 0
    runs = sorted(tmp_path.iterdir())
    assert len(runs) == 2 and runs[0].name != runs[1].name
    for run in runs:
        assert sorted(p.name for p in run.iterdir()) == ["checkpoint.pt", "config.cfg", "metrics.json", "metrics.jsonl"]
        rows = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2, 3]
        assert {"loss_uniform", "loss_balanced", "overall", "many", "medium", "few"} <= set(rows[0])
    final = json.loads((runs[0] / "metrics.json").read_text())
    capsys.readouterr()

    assert main(["eval", str(runs[0])]) == 0
    again = json.loads(capsys.readouterr().out)
    assert again["overall_acc"] == final["metrics"]["overall_acc"]

    assert main(["export-embeddings", str(runs[0]), "--out", str(tmp_path / "e.csv")]) == 0
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "sample_id,label,z0,z1" and len(lines) == 10001
    first = (tmp_path / "e.csv").read_bytes()
    main(["export-embeddings", str(runs[0]), "--out", str(tmp_path / "e.csv")])
    assert (tmp_path / "e.csv").read_bytes() == first

    assert main(["export-gradcam", str(runs[0]), "--out", str(tmp_path / "cam"), "--count", "3"]) == 0
    pgms = sorted((tmp_path / "cam").iterdir())
    assert len(pgms) == 6 and pgms[0].read_bytes().startswith(b"P5\n28 28\n255\n")
