import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from subspace_lab.cli import main, split_overrides
from subspace_lab.data import load_tensor

FAST = {"synth_subspaces": 3, "synth_dim": 3, "synth_ambient": 12, "synth_per": 20, "widths": [10],
        "batch_size": 16, "pretrain_epochs": 3, "finetune_epochs": 3}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(FAST))
    return p


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestGen:
    def test_files_and_determinism(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path / "a")]) == 0
        assert main(["gen", "--out", str(tmp_path / "b")]) == 0
        for ext in (".sctd", ".labels.csv"):
            assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
        assert load_tensor(tmp_path / "a.sctd").shape == (250, 30)
        assert "N=250" in capsys.readouterr().out

    def test_identifiability_exit_2(self, tmp_path, capsys):
        assert main(["gen", "--per", "3", "--dim", "4", "--out", str(tmp_path / "x")]) == 2
        assert "identifiability" in capsys.readouterr().err
        assert not (tmp_path / "x.sctd").exists()


class TestTrain:
    def test_missing_config_argument(self, capsys):
        assert main(["train"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_nonexistent_and_bad_key(self, tmp_path, config):
        assert main(["train", str(tmp_path / "none.json")]) == 2
        assert main(["train", str(config), "--no-such-key", "1"]) == 2
        assert main(["train", str(config), "--batch-size", "big"]) == 2

    def test_manifest_and_overrides(self, tmp_path, config, capsys):
        out = tmp_path / "run"
        assert main(["train", "--alpha", "10", str(config), "--out", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["alpha"] == 10.0 and man["overrides"] == {"alpha": 10.0}
        assert man["metrics"]["acc"] == printed["acc"] and 0 <= printed["nmi"] <= 1
        for key in ("C", "affinity", "labels", "checkpoint"):
            assert key in man["artifacts"]
        assert load_tensor(out / "C.sctd").shape == (60, 60)

    def test_dsc_matches_bdsc_at_full_batch(self, tmp_path, config):
        a, b = tmp_path / "dsc", tmp_path / "bdsc"
        common = ["--batch-size", "60", "--shuffle", "false"]
        assert main(["train", str(config), "--method", "dsc", "--out", str(a), *common]) == 0
        assert main(["train", str(config), "--method", "bdsc", "--out", str(b), *common]) == 0
        assert (a / "labels.csv").read_bytes() == (b / "labels.csv").read_bytes()
        ma, mb = (json.loads((d / "manifest.json").read_text())["metrics"] for d in (a, b))
        assert ma == mb

    def test_eval_round_trip(self, tmp_path, config, capsys):
        out = tmp_path / "run"
        main(["train", str(config), "--out", str(out)])
        acc_trained = json.loads(capsys.readouterr().out)["acc"]
        assert main(["eval", str(out / "labels.csv")]) == 0
        assert json.loads(capsys.readouterr().out)["acc"] == acc_trained

    def test_eval_without_truth(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("sample_id,pred\n0,1\n1,0\n")
        assert main(["eval", str(p)]) == 2


class TestCheck:
    @pytest.mark.parametrize("kind", ["grads", "equiv", "metrics"])
    def test_suites_pass(self, kind, capsys):
        assert main(["check", kind]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_unknown_suite(self):
        assert main(["check", "everything"]) == 2


class TestSweep:
    def test_single_cell(self, tmp_path, config):
        csv_path = tmp_path / "s.csv"
        assert main(["sweep", str(config), "--grid", "lr=0.001", "--out-csv", str(csv_path)]) == 0
        rows = read_csv(csv_path)
        assert len(rows) == 1 and rows[0]["lr"] == "0.001" and rows[0]["error"] == ""
        assert (tmp_path / "s.svg").read_text().startswith("<svg")

    def test_batch_by_lr_grid(self, tmp_path, config):
        csv_path, svg = tmp_path / "g.csv", tmp_path / "g.svg"
        argv = ["sweep", str(config), "--grid", "batch_size=8,16,30,60", "--grid", "lr=1e-4,3e-4,1e-3,3e-3,1e-2,3e-2",
                "--out-csv", str(csv_path), "--out-svg", str(svg), "--pretrain-epochs", "1", "--finetune-epochs", "1"]
        assert main(argv) == 0
        rows = read_csv(csv_path)
        assert len(rows) == 24
        assert [(r["batch_size"], r["lr"]) for r in rows[:2]] == [("8", "0.0001"), ("8", "0.0003")]
        assert all(r["error"] == "" for r in rows)
        assert svg.read_text().count("<rect") >= 24

    def test_failing_cell_keeps_going(self, tmp_path, config):
        csv_path = tmp_path / "f.csv"
        assert main(["sweep", str(config), "--grid", "batch_size=0,30", "--out-csv", str(csv_path)]) == 0
        rows = read_csv(csv_path)
        assert rows[0]["error"].startswith("ConfigError") and np.isnan(float(rows[0]["acc"]))
        assert rows[1]["error"] == ""

    def test_bad_grid_spec(self, tmp_path, config):
        assert main(["sweep", str(config), "--grid", "nonsense", "--out-csv", str(tmp_path / "x.csv")]) == 2


class TestArgSplitting:
    def test_overrides_anywhere(self):
        argv, extra = split_overrides(["train", "--method", "dsc", "c.json", "--out", "r", "--alpha=3"])
        assert argv == ["train", "c.json", "--out", "r"]
        assert extra == ["--method", "dsc", "--alpha=3"]

    def test_other_commands_untouched(self):
        assert split_overrides(["gen", "--per", "5"]) == (["gen", "--per", "5"], [])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "subspace_lab", "gen", "--out", str(tmp_path / "m"), "--per", "6", "--subspaces", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "m.sctd").exists()
    proc = subprocess.run([sys.executable, "-m", "subspace_lab"], capture_output=True, text=True)
    assert proc.returncode == 2
