import csv
import os
import stat

import numpy as np
import pytest

from sfuda import cli, losses
from sfuda.config import RunConfig, from_ini, to_ini

from .conftest import tiny_config


def _csv_rows(path):
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def test_gen_data_row_count_and_determinism(tmp_path, tiny_config_file):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["gen-data", "--config", str(tiny_config_file), "--seed", "3", "--out", str(a)]) == 0
    assert cli.main(["gen-data", "--config", str(tiny_config_file), "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _csv_rows(a)
    assert len(rows) == 220
    assert sum(r["split"] == "source" for r in rows) == 120
    assert [int(r["sample_id"]) for r in rows] == list(range(220))


def test_gen_data_unwritable_path(tmp_path, tiny_config_file, capsys):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
    try:
        if os.access(locked, os.W_OK):
            pytest.skip("running with permissions that ignore directory modes")
        code = cli.main(["gen-data", "--config", str(tiny_config_file), "--out", str(locked / "d.csv")])
    finally:
        locked.chmod(stat.S_IRWXU)
    assert code != 0
    assert "d.csv" in capsys.readouterr().err


def test_gen_data_missing_directory(tmp_path, tiny_config_file, capsys):
    code = cli.main(["gen-data", "--config", str(tiny_config_file), "--out", str(tmp_path / "no" / "d.csv")])
    assert code != 0
    assert capsys.readouterr().err


def test_adapt_single_seed(tmp_path, tiny_config_file):
    out = tmp_path / "run"
    assert cli.main(["adapt", "--config", str(tiny_config_file), "--out-dir", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["metrics_seed0.csv", "summary_seed0.ini"]
    rows = _csv_rows(out / "metrics_seed0.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert list(rows[0]) == list(cli.METRIC_COLUMNS)
    summary = (out / "summary_seed0.ini").read_text()
    assert summary.startswith(cli.SUMMARY_HEADER)
    echoed = from_ini(summary, allow_extra_sections=("results",))
    assert echoed == tiny_config()


def test_adapt_multiple_seeds_and_extras(tmp_path, tiny_config_file):
    out = tmp_path / "run"
    argv = ["adapt", "--config", str(tiny_config_file), "--seeds", "1,2,3", "--out-dir", str(out),
            "--dump-data", "--queue-log", "--save-model"]
    assert cli.main(argv) == 0
    for s in (1, 2, 3):
        for name in (f"metrics_seed{s}.csv", f"summary_seed{s}.ini", f"data_seed{s}.csv",
                     f"queue_seed{s}.csv", f"model_seed{s}.npz"):
            assert (out / name).exists(), name


def test_adapt_metrics_byte_identical(tmp_path, tiny_config_file):
    for d in ("a", "b"):
        assert cli.main(["adapt", "--config", str(tiny_config_file), "--out-dir", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "metrics_seed0.csv").read_bytes() == (tmp_path / "b" / "metrics_seed0.csv").read_bytes()


def test_adapt_with_source_checkpoint(tmp_path, tiny_config_file):
    ckpt = tmp_path / "source.npz"
    assert cli.main(["train-source", "--config", str(tiny_config_file), "--out", str(ckpt)]) == 0
    assert cli.main(["adapt", "--config", str(tiny_config_file), "--out-dir", str(tmp_path / "a"),
                     "--source-checkpoint", str(ckpt)]) == 0
    assert cli.main(["adapt", "--config", str(tiny_config_file), "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics_seed0.csv").read_bytes() == (tmp_path / "b" / "metrics_seed0.csv").read_bytes()


def test_adapt_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(to_ini(tiny_config()).replace("k_neighbors", "k_neighbours"))
    code = cli.main(["adapt", "--config", str(bad), "--out-dir", str(tmp_path / "out")])
    assert code == 2
    assert "k_neighbours" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    code = cli.main(["adapt", "--config", str(tmp_path / "nope.ini"), "--out-dir", str(tmp_path)])
    assert code != 0
    assert "nope.ini" in capsys.readouterr().err


def test_ablate_summary(tmp_path, tiny_config_file):
    out = tmp_path / "abl"
    argv = ["ablate", "--config", str(tiny_config_file), "--seeds", "0,1", "--out-dir", str(out),
            "--cells", "refine_only,full,history_T1"]
    assert cli.main(argv) == 0
    rows = _csv_rows(out / "ablation_summary.csv")
    assert sorted((r["cell"], r["seed"]) for r in rows) == sorted(
        (c, s) for c in ("refine_only", "full", "history_T1") for s in ("0", "1"))
    medians = _csv_rows(out / "ablation_medians.csv")
    assert {r["cell"] for r in medians} == {"refine_only", "full", "history_T1"}
    assert (out / "full" / "metrics_seed1.csv").exists()


def test_ablate_unknown_cell(tmp_path, tiny_config_file, capsys):
    code = cli.main(["ablate", "--config", str(tiny_config_file), "--out-dir", str(tmp_path), "--cells", "bogus"])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_grad_check_passes(capsys):
    assert cli.main(["grad-check", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "FAIL" not in out


def test_grad_check_detects_corrupted_gradient(monkeypatch, capsys):
    real = losses.diversity_loss

    def corrupted(logits):
        lv = real(logits)
        return losses.LossValue(lv.value, {"logits": lv.grads["logits"] * 1.01})

    monkeypatch.setattr(losses, "diversity_loss", corrupted)
    assert cli.main(["grad-check", "--trials", "5"]) == 1
    assert "FAIL diversity" in capsys.readouterr().out


def test_default_config_is_valid():
    RunConfig().validate()
    assert from_ini(to_ini(RunConfig())) == RunConfig()
    assert np.isclose(RunConfig().data.rotation, np.pi / 4)
