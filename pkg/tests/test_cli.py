import json
from pathlib import Path

import pytest

from lookout.cli import main

TINY_SET = [
    "--set", "world.row_length=5.0",
    "--set", "world.lidar_beams=61",
    "--set", "world.image_height=16",
    "--set", "world.image_width=24",
    "--set", "world.horizon=4",
    "--set", "world.obstacle_rate=1.2",
]
TINY_TRAIN = [
    "--set", "train.epochs=1",
    "--set", "train.seq_len=4",
    "--set", "train.batch_size=4",
]


def gen(tmp_path, name="data", episodes=4, seed=1, extra=()):
    out = tmp_path / name
    rc = main(
        ["gen-data", "--out", str(out), "--episodes", str(episodes), "--seed", str(seed)]
        + TINY_SET
        + list(extra)
    )
    assert rc == 0
    return out


class TestGenData:
    def test_writes_dataset_and_resolved_config(self, tmp_path, capsys):
        out = gen(tmp_path)
        assert (out / "episodes.jsonl").exists()
        assert (out / "manifest.json").exists()
        resolved = (out / "resolved.cfg").read_text()
        assert "world.lidar_beams = 61" in resolved
        assert "derived.lidar_occ_sector_start" in resolved

    def test_byte_identical_for_same_seed(self, tmp_path):
        a = gen(tmp_path, "a", seed=7)
        b = gen(tmp_path, "b", seed=7)
        assert (a / "episodes.jsonl").read_bytes() == (b / "episodes.jsonl").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = gen(tmp_path, "a", seed=1)
        b = gen(tmp_path, "b", seed=2)
        assert (a / "episodes.jsonl").read_bytes() != (b / "episodes.jsonl").read_bytes()


class TestValidationFailures:
    def test_unknown_flag_exits_1_without_artifacts(self, tmp_path, capsys):
        out = tmp_path / "data"
        rc = main(["gen-data", "--out", str(out), "--bogus-flag", "3"])
        assert rc == 1
        assert not out.exists()
        err = capsys.readouterr().err
        assert err.startswith("error: validation:")
        assert err.count("\n") == 1

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert capsys.readouterr().err.startswith("error: validation:")

    def test_bad_config_value_exits_1(self, tmp_path, capsys):
        out = tmp_path / "data"
        rc = main(["gen-data", "--out", str(out), "--set", "train.alpha=-1"] + TINY_SET)
        assert rc == 1
        assert not out.exists()

    def test_missing_dataset_exits_1(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "run")]
                  + TINY_TRAIN)
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: validation:")

    def test_world_override_conflicting_with_manifest(self, tmp_path, capsys):
        data = gen(tmp_path)
        rc = main(
            ["train", "--data", str(data), "--out", str(tmp_path / "run"),
             "--set", "world.lidar_beams=31"] + TINY_TRAIN
        )
        assert rc == 1
        assert "conflicts" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One shared gen-data + train so the expensive steps run once."""
    tmp_path = tmp_path_factory.mktemp("cli")
    data = gen(tmp_path, episodes=5)
    run = tmp_path / "run"
    rc = main(["train", "--data", str(data), "--out", str(run)] + TINY_TRAIN)
    assert rc == 0
    return tmp_path, data, run


class TestTrainEvalStress:
    def test_train_artifacts(self, pipeline):
        _, _, run = pipeline
        assert (run / "checkpoint.bin").exists()
        assert (run / "checkpoint_best.bin").exists()
        assert (run / "resolved.cfg").exists()
        log = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert len(log) == 1
        assert {"epoch", "total", "svae", "anomaly"} <= set(log[0])

    def test_train_is_reproducible(self, pipeline, tmp_path):
        base, data, run = pipeline
        run2 = tmp_path / "run2"
        rc = main(["train", "--data", str(data), "--out", str(run2)] + TINY_TRAIN)
        assert rc == 0
        assert (run / "checkpoint.bin").read_bytes() == (run2 / "checkpoint.bin").read_bytes()

    def test_eval_writes_metrics(self, pipeline, tmp_path, capsys):
        _, data, run = pipeline
        out = tmp_path / "report"
        rc = main(
            ["eval", "--data", str(data), "--checkpoint", str(run / "checkpoint.bin"),
             "--out", str(out)] + TINY_TRAIN
        )
        assert rc == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= metrics["anomaly"]["pr_auc"] <= 1.0
        assert "camera" in metrics["occlusion"]
        assert (out / "resolved.cfg").exists()

    def test_eval_rejects_mismatched_config(self, pipeline, tmp_path, capsys):
        _, data, run = pipeline
        rc = main(
            ["eval", "--data", str(data), "--checkpoint", str(run / "checkpoint.bin"),
             "--out", str(tmp_path / "rep2"), "--set", "train.lr=0.9"] + TINY_TRAIN
        )
        assert rc == 1
        assert "hash" in capsys.readouterr().err

    def test_eval_does_not_mutate_dataset(self, pipeline, tmp_path):
        _, data, run = pipeline
        before = (data / "episodes.jsonl").read_bytes()
        main(["eval", "--data", str(data), "--checkpoint", str(run / "checkpoint.bin"),
              "--out", str(tmp_path / "rep3")] + TINY_TRAIN)
        assert (data / "episodes.jsonl").read_bytes() == before

    def test_stress_report(self, pipeline, tmp_path):
        _, data, run = pipeline
        out = tmp_path / "stress"
        rc = main(
            ["stress", "--checkpoint", str(run / "checkpoint.bin"), "--out", str(out),
             "--k", "2", "--episodes", "2"] + TINY_SET + TINY_TRAIN
        )
        assert rc == 0
        payload = json.loads((out / "stress.json").read_text())
        assert payload["k"] == 2
        assert payload["episodes"] == 2
        assert len(payload["rows"]) == 2
        for row in payload["rows"]:
            # exactly k occluded-frame predictions inspected per episode
            assert len(row["per_frame_max"]) >= 2
            assert 0.0 <= row["max_prob"] <= 1.0

    def test_report_dir_env_override(self, pipeline, tmp_path, monkeypatch):
        _, data, run = pipeline
        target = tmp_path / "env_report"
        monkeypatch.setenv("LOOKOUT_REPORT_DIR", str(target))
        rc = main(["eval", "--data", str(data), "--checkpoint", str(run / "checkpoint.bin")]
                  + TINY_TRAIN)
        assert rc == 0
        assert (target / "metrics.json").exists()


class TestAblate:
    def test_report_has_variant_times_seed_rows(self, tmp_path):
        data = gen(tmp_path, episodes=5)
        out = tmp_path / "ablation"
        rc = main(
            ["ablate", "--data", str(data), "--out", str(out),
             "--variants", "full,no_state", "--seeds", "1,2,3",
             "--set", "run.test_fraction=0.2"] + TINY_TRAIN
        )
        assert rc == 0
        payload = json.loads((out / "ablation.json").read_text())
        assert len(payload["rows"]) == 6
        assert set(payload["summary"]) == {"full", "no_state"}
        for summary in payload["summary"].values():
            assert 0.0 <= summary["mean_pr_auc"] <= 1.0

    def test_means_match_rows(self, tmp_path):
        data = gen(tmp_path, episodes=5)
        out = tmp_path / "ablation2"
        rc = main(
            ["ablate", "--data", str(data), "--out", str(out),
             "--variants", "no_state", "--seeds", "1,2"] + TINY_TRAIN
        )
        assert rc == 0
        payload = json.loads((out / "ablation.json").read_text())
        rows = [r["pr_auc"] for r in payload["rows"]]
        assert payload["summary"]["no_state"]["mean_pr_auc"] == pytest.approx(
            sum(rows) / len(rows), abs=1e-12
        )
