import json
import os

import numpy as np
import pytest

from egworld.cli import main

MODEL_FLAGS = ["--width", "32", "--depth", "2", "--heads", "2", "--max-frames", "12"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run")
    assert main(["gen-data", "--out", data, "--train-clips", "2",
                 "--eval-clips", "1", "--frames", "16"]) == 0
    assert main(["--seed", "3", "train", "--data", data, "--out", run,
                 "--strategy", "token_add", "--steps", "4", "--batch", "2",
                 "--frames", "8", *MODEL_FLAGS]) == 0
    return {"root": root, "data": data,
            "checkpoint": os.path.join(run, "model.egwt")}


def test_gen_data_and_train_outputs(workspace):
    assert os.path.exists(os.path.join(workspace["data"], "manifest.json"))
    assert os.path.exists(workspace["checkpoint"])
    run_dir = os.path.dirname(workspace["checkpoint"])
    with open(os.path.join(run_dir, "train.jsonl")) as f:
        rows = [json.loads(line) for line in f]
    assert rows and all("loss" in r for r in rows)


def test_sample_writes_npz(workspace, capsys):
    out = str(workspace["root"] / "sample.npz")
    assert main(["sample", "--checkpoint", workspace["checkpoint"],
                 "--data", workspace["data"], "--frames", "8",
                 "--steps", "2", "--out", out]) == 0
    doc = np.load(out)
    assert doc["generated"].shape == (8, 48, 48, 3)
    assert doc["ground_truth"].shape == (8, 48, 48, 3)
    assert "psnr" in capsys.readouterr().out


def test_eval_writes_csv_and_md(workspace):
    out = str(workspace["root"] / "report.csv")
    assert main(["eval", "--checkpoint", workspace["checkpoint"],
                 "--data", workspace["data"], "--frames", "8",
                 "--steps", "2", "--max-clips", "1", "--out", out]) == 0
    with open(out) as f:
        header, row = f.read().strip().splitlines()
    assert "psnr" in header and row
    assert os.path.exists(str(workspace["root"] / "report.md"))


def test_rollout_emits_expected_frames(workspace):
    out = str(workspace["root"] / "rollout.npz")
    assert main(["rollout", "--checkpoint", workspace["checkpoint"],
                 "--data", workspace["data"], "--chunks", "2", "--chunk", "8",
                 "--context", "2", "--steps", "2", "--out", out]) == 0
    frames = np.load(out)["frames"]
    assert frames.shape == (8 + 6, 48, 48, 3)  # second chunk shares 2 frames


def test_rollout_rejects_short_clip(workspace):
    with pytest.raises(SystemExit, match="chunks"):
        main(["rollout", "--checkpoint", workspace["checkpoint"],
              "--data", workspace["data"], "--chunks", "5", "--chunk", "12",
              "--context", "4", "--steps", "2", "--out", "x.npz"])


def test_bench_report(workspace, capsys):
    out = str(workspace["root"] / "bench.json")
    assert main(["bench", "--checkpoint", workspace["checkpoint"],
                 "--chunks", "2", "--chunk", "4", "--context", "1",
                 "--steps", "1", "--out", out]) == 0
    with open(out) as f:
        rep = json.load(f)
    assert rep["fps"] == rep["chunk_frames"] * rep["chunks"] / rep["total_s"]
    assert "fps" in capsys.readouterr().out


def test_config_file_supplies_defaults(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    out = str(tmp_path / "from_config.npz")
    cfg.write_text(json.dumps({
        "seed": 1,
        "sample": {"checkpoint": workspace["checkpoint"],
                   "data": workspace["data"], "frames": 8,
                   "steps": 2, "out": out},
    }))
    assert main(["--config", str(cfg), "sample"]) == 0
    assert os.path.exists(out)


def test_config_file_rejects_unknown_keys(workspace, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"bench": {"not_a_flag": 1}}))
    with pytest.raises(SystemExit, match="unknown"):
        main(["--config", str(cfg), "bench", "--checkpoint",
              workspace["checkpoint"]])


def test_env_var_is_default_data_dir(workspace, monkeypatch, tmp_path):
    monkeypatch.setenv("EGWL_DATA_DIR", workspace["data"])
    out = str(tmp_path / "env_report.csv")
    assert main(["eval", "--checkpoint", workspace["checkpoint"],
                 "--frames", "8", "--steps", "2", "--max-clips", "1",
                 "--out", out]) == 0
    assert os.path.exists(out)
