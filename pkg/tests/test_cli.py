import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from kplora.cli import main
from kplora.data import serialize_answer
from kplora.task import make_toy_task, toy_ground_truth, write_toy_annotations

FIXTURE = Path(__file__).parent / "fixtures" / "annotations.json"

FAST = [
    "--n-train", "96", "--epochs", "1", "--n-eval", "12",
    "--batch-size", "16", "--seed", "7",
]


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def trained_dir(runner, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    result = runner.invoke(main, ["train-toy", "--out", str(out), *FAST])
    assert result.exit_code == 0, result.output
    return out


class TestBuildData:
    def test_fixture_to_jsonl(self, runner, tmp_path):
        out = tmp_path / "data.jsonl"
        result = runner.invoke(main, ["build-data", str(FIXTURE), "--out", str(out)])
        assert result.exit_code == 0
        assert "records=5" in result.output
        assert "instances=7" in result.output
        assert len(out.read_text().splitlines()) == 5

    def test_stats_match_node_count_oracle(self, runner, tmp_path):
        out = tmp_path / "data.jsonl"
        result = runner.invoke(main, ["build-data", str(FIXTURE), "--out", str(out)])
        doc = json.loads(FIXTURE.read_text())
        oracle = sum(len(i["instances"]) for i in doc["images"])
        assert f"instances={oracle}" in result.output

    def test_corrupt_json_exits_2_with_offset(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"classes": [1,,]}')
        result = runner.invoke(main, ["build-data", str(bad), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2
        assert "byte offset" in result.output

    def test_unknown_class_exits_2(self, runner, tmp_path):
        doc = json.loads(FIXTURE.read_text())
        doc["images"][0]["instances"][0]["class_name"] = "Banana"
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        result = runner.invoke(main, ["build-data", str(bad), "--out", str(tmp_path / "o")])
        assert result.exit_code == 2
        assert "Banana" in result.output


class TestTrainToy:
    def test_artifacts_exist(self, trained_dir):
        for name in ("checkpoint.bin", "train_log.csv", "loss_curve.png", "config.json"):
            assert (trained_dir / name).exists(), name

    def test_loss_decreases(self, trained_dir):
        with (trained_dir / "train_log.csv").open() as f:
            losses = [float(r["loss"]) for r in csv.DictReader(f)]
        assert losses[-1] < losses[0]

    def test_defaults_recorded(self, trained_dir):
        cfg = json.loads((trained_dir / "config.json").read_text())
        assert cfg["rank"] == 8
        assert cfg["alpha"] == 16.0
        assert cfg["dropout"] == 0.05
        assert cfg["command"] == "train-toy"

    def test_flag_overrides_config_file(self, runner, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"rank": 4, "epochs": 1, "n_train": 32,
                                        "n_eval": 8}))
        out = tmp_path / "run"
        result = runner.invoke(
            main,
            ["train-toy", "--out", str(out), "--config", str(cfg_file), "--rank", "2"],
        )
        assert result.exit_code == 0, result.output
        merged = json.loads((out / "config.json").read_text())
        assert merged["rank"] == 2  # flag wins
        assert merged["n_train"] == 32  # file wins over default

    def test_unknown_config_key_exits_2(self, runner, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"rnak": 4}))
        result = runner.invoke(
            main, ["train-toy", "--out", str(tmp_path / "run"), "--config", str(cfg_file)]
        )
        assert result.exit_code == 2
        assert "rnak" in result.output


class TestPredictEval:
    def test_predict_then_eval(self, runner, trained_dir, tmp_path):
        pred = tmp_path / "pred"
        result = runner.invoke(main, [
            "predict-toy", "--checkpoint", str(trained_dir / "checkpoint.bin"),
            "--out", str(pred), *FAST,
        ])
        assert result.exit_code == 0, result.output
        lines = (pred / "predictions.jsonl").read_text().splitlines()
        assert len(lines) == 12
        evald = tmp_path / "eval"
        result = runner.invoke(main, [
            "eval", "--predictions", str(pred / "predictions.jsonl"),
            "--ground-truth", str(pred / "ground_truth.json"),
            "--out", str(evald), "--label", "smoke",
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((evald / "report.json").read_text())
        assert set(report["pck"]) == {"0.05", "0.1"}
        assert (evald / "per_class.png").exists()
        assert "smoke" in (evald / "report.txt").read_text()

    def test_perfect_predictions_score_perfectly(self, runner, tmp_path):
        samples = make_toy_task(10, seed=3)
        gt_path = tmp_path / "gt.json"
        write_toy_annotations(samples, gt_path)
        pred_path = tmp_path / "pred.jsonl"
        with pred_path.open("w") as f:
            for s, gt in zip(samples, toy_ground_truth(samples)):
                f.write(json.dumps({
                    "sample_id": s.sample_id,
                    "output": serialize_answer(gt.instances),
                }) + "\n")
        out = tmp_path / "eval"
        result = runner.invoke(main, [
            "eval", "--predictions", str(pred_path), "--ground-truth", str(gt_path),
            "--out", str(out), "--policy", "strict",
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert report["mpjpe"] == 0.0
        assert report["pck"]["0.05"] == 1.0
        assert report["pck"]["0.1"] == 1.0
        assert "0.0000" in (out / "report.txt").read_text()

    def test_repeatable_pck_alpha_flag(self, runner, tmp_path):
        samples = make_toy_task(4, seed=3)
        gt_path = tmp_path / "gt.json"
        write_toy_annotations(samples, gt_path)
        pred_path = tmp_path / "pred.jsonl"
        with pred_path.open("w") as f:
            for s, gt in zip(samples, toy_ground_truth(samples)):
                f.write(json.dumps({
                    "sample_id": s.sample_id,
                    "output": serialize_answer(gt.instances),
                }) + "\n")
        out = tmp_path / "eval"
        result = runner.invoke(main, [
            "eval", "--predictions", str(pred_path), "--ground-truth", str(gt_path),
            "--out", str(out), "--pck-alpha", "0.02", "--pck-alpha", "0.2",
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert set(report["pck"]) == {"0.02", "0.2"}

    def test_unknown_sample_id_exits_2(self, runner, tmp_path):
        samples = make_toy_task(2, seed=3)
        gt_path = tmp_path / "gt.json"
        write_toy_annotations(samples, gt_path)
        pred_path = tmp_path / "pred.jsonl"
        pred_path.write_text(json.dumps({"sample_id": "nope", "output": "(1,2)"}) + "\n")
        result = runner.invoke(main, [
            "eval", "--predictions", str(pred_path), "--ground-truth", str(gt_path),
            "--out", str(tmp_path / "eval"),
        ])
        assert result.exit_code == 2
        assert "nope" in result.output

    def test_internal_error_exits_1(self, runner, tmp_path):
        result = runner.invoke(main, [
            "predict-toy", "--checkpoint", str(tmp_path), "--out", str(tmp_path / "x"),
        ])
        assert result.exit_code == 1


class TestOutRoot:
    def test_env_var_sets_default_output_root(self, runner, tmp_path, monkeypatch):
        monkeypatch.setenv("KPLORA_OUT_ROOT", str(tmp_path / "root"))
        monkeypatch.chdir(tmp_path)
        result = runner.invoke(main, ["build-data", str(FIXTURE)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "root" / "build-data" / "dataset.jsonl").exists()


class TestAblateRank:
    def test_tiny_sweep_report_shape(self, runner, tmp_path):
        out = tmp_path / "abl"
        result = runner.invoke(main, [
            "ablate-rank", "--out", str(out), "--ranks", "2", "--ranks", "4",
            "--n-train", "48", "--epochs", "1", "--n-eval", "6",
        ])
        assert result.exit_code == 0, result.output
        rows = json.loads((out / "ablation.json").read_text())
        assert [r["rank"] for r in rows] == [2, 4]
        table = (out / "ablation.txt").read_text()
        assert table.splitlines()[0].split() == [
            "LoRA", "Rank", "MPJPE", "PCK@0.05", "PCK@0.10"
        ]
        assert "Rank = 2" in table
        assert (out / "ablation.png").exists()
        for rank in (2, 4):
            for name in ("checkpoint.bin", "report.json", "config.json",
                         "predictions.jsonl", "ground_truth.json", "train_log.csv"):
                assert (out / f"rank-{rank}" / name).exists()
