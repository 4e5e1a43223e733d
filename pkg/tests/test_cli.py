import json

import pytest

from ehrtext.cli import main, sha256_file

SMALL = {"n_d": 8, "n_a": 8, "n_steps": 2, "text_layers": 2, "text_heads": 2, "text_ffn": 64,
         "text_frozen": 1, "holdout": 20}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--out", str(root / "data"), "--pairs", "400", "--trainval-size", "40",
                 "--test-size", "30", "--seed", "3"]) == 0
    return root


def run(work, *argv):
    return main([*argv, "--config", str(work / "small.json")])


@pytest.fixture(scope="module")
def chain(work):
    data = str(work / "data")
    assert run(work, "pretrain-masked", "--data", data, "--out", str(work / "m"), "--epochs", "1") == 0
    assert run(work, "pretrain-cl", "--data", data, "--out", str(work / "cl"), "--epochs", "1",
               "--init", str(work / "m" / "masked.ckpt"), "--tau", "0.2") == 0
    assert run(work, "finetune", "--data", data, "--out", str(work / "ft"), "--epochs", "2",
               "--init", str(work / "cl" / "cl.ckpt"), "--task", "readmission") == 0
    return work


class TestGenData:
    def test_files(self, work):
        assert {p.name for p in (work / "data").iterdir()} >= {"tabular.csv", "notes.jsonl", "split.json"}

    def test_same_seed_same_bytes(self, work, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--pairs", "400", "--trainval-size", "40",
                     "--test-size", "30", "--seed", "3"]) == 0
        for name in ("tabular.csv", "notes.jsonl", "split.json"):
            assert sha256_file(tmp_path / name) == sha256_file(work / "data" / name)

    def test_refuses_overwrite_without_force(self, work, capsys):
        args = ["gen-data", "--out", str(work / "data"), "--pairs", "400", "--trainval-size", "40",
                "--test-size", "30", "--seed", "3"]
        assert main(args) == 2
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0


class TestUsage:
    def test_missing_required_flag(self, capsys):
        assert main(["finetune", "--out", "x", "--data", "y", "--task", "readmission"]) == 1
        assert "--init" in capsys.readouterr().err

    def test_bad_fraction(self, work):
        assert main(["finetune", "--out", "x", "--data", "y", "--init", "z", "--task", "t",
                     "--fraction", "0.3"]) == 1

    def test_unknown_command(self):
        assert main(["train-everything"]) == 1

    def test_missing_input_is_runtime_error(self, tmp_path):
        assert main(["pretrain-masked", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_bad_config_value(self, work, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"lr": -1}))
        assert main(["pretrain-masked", "--data", str(work / "data"), "--out", str(tmp_path / "o"),
                     "--config", str(tmp_path / "bad.json")]) == 2


class TestChain:
    def test_config_snapshot_precedence(self, chain):
        snap = json.loads((chain / "cl" / "config.resolved.json").read_text())
        assert snap["command"] == "pretrain-cl"
        assert snap["flags"]["tau"] == 0.2 and snap["flags"]["epochs"] == 1
        cfg = snap["config"]
        assert cfg["tau"] == 0.2 and cfg["epochs"] == 1
        assert cfg["n_d"] == 8 and cfg["lr"] == 1e-4

    def test_manifest_hashes(self, chain):
        man = json.loads((chain / "ft" / "manifest.json").read_text())
        assert man["outputs"]["finetune.ckpt"] == sha256_file(chain / "ft" / "finetune.ckpt")
        assert str(chain / "cl" / "cl.ckpt") in man["inputs"]

    def test_train_log_and_metrics(self, chain):
        lines = (chain / "ft" / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(x)["epoch"] for x in lines] == [0, 1]
        metrics = json.loads((chain / "ft" / "metrics.json").read_text())
        assert 0 <= metrics["test_auc"] <= 1

    def test_predict(self, chain):
        assert main(["predict", "--init", str(chain / "ft" / "finetune.ckpt"), "--data",
                     str(chain / "data"), "--out", str(chain / "pred")]) == 0
        rows = (chain / "pred" / "predictions.csv").read_text().splitlines()
        assert len(rows) == 401

    def test_predict_rejects_pretraining_checkpoint(self, chain):
        assert main(["predict", "--init", str(chain / "m" / "masked.ckpt"), "--data",
                     str(chain / "data"), "--out", str(chain / "pred2")]) == 2

    def test_evaluate_and_report(self, chain):
        assert run(chain, "evaluate", "--data", str(chain / "data"), "--out", str(chain / "ev"),
                   "--epochs", "1", "--task", "critical", "--fraction", "1.0",
                   "--init", f"cl-init={chain / 'cl' / 'cl.ckpt'}",
                   "--init", f"masked-init={chain / 'm' / 'masked.ckpt'}") == 0
        assert main(["report", "--task", "critical", "--dir", str(chain / "ev")]) == 0
        table = (chain / "ev" / "report_critical.txt").read_text()
        assert "cl-init" in table and "masked-init" in table
        ttests = json.loads((chain / "ev" / "ttests_critical.json").read_text())
        assert len(ttests) == 1 and ttests[0]["b"] == "masked-init"
