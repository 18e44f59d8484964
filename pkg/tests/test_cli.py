import json
import subprocess
import sys

import numpy as np
import pytest

from fsda.cli import main
from fsda.feature_store import FeatureTable, save_feature_table
from fsda.pipeline import load_predictions, save_predictions

FAST_CONFIG = {"train": {"epochs": 3}}


def dir_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def data(tmp_path):
    d = tmp_path / "data"
    assert main(["gen", "--preset", "shifted", "--out", str(d), "--seed", "3", "--labeled-per-class", "1"]) == 0
    (tmp_path / "fast.json").write_text(json.dumps(FAST_CONFIG))
    return d, tmp_path / "fast.json"


def test_gen_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--preset", "easy", "--out", str(tmp_path / name), "--seed", "7"]) == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


def test_pipeline_one_round_writes_three_reports(data, tmp_path):
    d, cfg = data
    rc = main(["pipeline", "--mode", "multi_source", "--rounds", "1", "--manifest", str(d / "manifest.json"),
               "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert rc == 0
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert [r["stage"] for r in metrics["reports"]] == ["pretrain", "eea", "ffa"]
    assert metrics["final"]["mean_acc_all"] > 0.5
    probs = load_predictions(tmp_path / "run" / "predictions.fsdr")
    assert probs.shape == (200, 5)


def test_pipeline_semi_and_reference_preset(data, tmp_path):
    d, cfg = data
    m = str(d / "manifest.json")
    assert main(["pipeline", "--mode", "semi_supervised", "--preset", "paper", "--manifest", m,
                 "--config", str(cfg), "--out", str(tmp_path / "semi")]) == 0
    metrics = json.loads((tmp_path / "semi" / "metrics.json").read_text())
    assert metrics["rounds"] == 3
    assert len(metrics["reports"]) == 4
    assert len(metrics["final_members"]) == 6
    assert main(["pipeline", "--preset", "paper", "--manifest", m, "--config", str(cfg),
                 "--out", str(tmp_path / "ms")]) == 0
    metrics = json.loads((tmp_path / "ms" / "metrics.json").read_text())
    assert metrics["rounds"] == 4
    assert len(metrics["reports"]) == 9


def test_eval_hand_example(tmp_path, capsys):
    save_feature_table(FeatureTable("t", "t", np.zeros((4, 1)), [0, 0, 0, 1], 2), tmp_path / "t.fsda")
    save_predictions(np.eye(2)[[0, 0, 1, 1]], tmp_path / "p.fsdr")
    rc = main(["eval", "--pred", str(tmp_path / "p.fsdr"), "--truth", str(tmp_path / "t.fsda"),
               "--report", str(tmp_path / "r.json")])
    assert rc == 0
    assert capsys.readouterr().out == "mean_acc_all 0.7500\nmean_acc_classes 0.8333\n"
    assert json.loads((tmp_path / "r.json").read_text())["confusion"] == [[2, 1], [0, 1]]


def test_eval_shape_mismatch(tmp_path, capsys):
    save_feature_table(FeatureTable("t", "t", np.zeros((4, 1)), [0, 0, 0, 1], 2), tmp_path / "t.fsda")
    save_predictions(np.full((3, 2), 0.5), tmp_path / "p.fsdr")
    assert main(["eval", "--pred", str(tmp_path / "p.fsdr"), "--truth", str(tmp_path / "t.fsda")]) == 1
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert main(["pipeline", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_invalid_inputs_exit_1(data, tmp_path, capsys):
    d, _ = data
    m = str(d / "manifest.json")
    assert main(["pipeline", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "bad.json").write_text(json.dumps({"rounds": 0}))
    assert main(["pipeline", "--manifest", m, "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "unknown.json").write_text(json.dumps({"train": {"lr": 1}}))
    assert main(["pretrain", "--manifest", m, "--config", str(tmp_path / "unknown.json"), "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "garbage.json").write_text("{not json")
    assert main(["pipeline", "--manifest", str(tmp_path / "garbage.json"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.count("error:") == 4


def test_stage_chain(data, tmp_path):
    d, cfg = data
    base = ["--manifest", str(d / "manifest.json"), "--config", str(cfg)]
    s = tmp_path / "stages"
    assert main(["pretrain", *base, "--out", str(s / "p")]) == 0
    assert main(["eea", *base, "--state", str(s / "p"), "--out", str(s / "e")]) == 0
    assert main(["ffa", *base, "--state", str(s / "e"), "--out", str(s / "f")]) == 0
    assert main(["proto", *base, "--state", str(s / "e"), "--out", str(s / "c")]) == 0
    assert sorted(p.name for p in (s / "e" / "classifiers").iterdir()) == ["bb0.fsdc", "bb1.fsdc", "bb2.fsdc"]
    assert len(list((s / "f" / "bank").iterdir())) == 6
    assert json.loads((s / "f" / "pseudo.json").read_text())["round_index"] == 2
    assert (s / "c" / "combined.fsdr").is_file()
    # a state without classifiers cannot feed eea
    assert main(["eea", *base, "--state", str(s / "f"), "--out", str(s / "x")]) == 1


def test_stage_chain_matches_pipeline(data, tmp_path):
    d, cfg = data
    base = ["--manifest", str(d / "manifest.json"), "--config", str(cfg)]
    s = tmp_path / "stages"
    assert main(["pretrain", *base, "--out", str(s / "p")]) == 0
    assert main(["eea", *base, "--state", str(s / "p"), "--out", str(s / "e")]) == 0
    assert main(["pipeline", *base, "--rounds", "1", "--out", str(tmp_path / "run")]) == 0
    for b in ("bb0", "bb1", "bb2"):
        staged = (s / "e" / "classifiers" / f"{b}.fsdc").read_bytes()
        assert staged == (tmp_path / "run" / "checkpoints" / "r01_eea" / f"{b}.fsdc").read_bytes()


def test_inspect(data, tmp_path, capsys):
    d, cfg = data
    main(["pretrain", "--manifest", str(d / "manifest.json"), "--config", str(cfg), "--out", str(tmp_path / "p")])
    capsys.readouterr()
    files = [d / "source0" / "bb0.fsda", tmp_path / "p" / "classifiers" / "bb0.fsdc", tmp_path / "p" / "predictions.fsdr"]
    assert main(["inspect", *map(str, files)]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["magic"] for r in rows] == ["FSDA", "FSDC", "FSDR"]
    assert rows[0]["sample_count"] == 200 and rows[0]["labels_present"]
    assert rows[1]["class_count"] == 5 and rows[1]["input_dim"] == 16
    assert rows[2]["sample_count"] == 200
    (tmp_path / "junk.bin").write_bytes(b"JUNKJUNK")
    assert main(["inspect", str(tmp_path / "junk.bin")]) == 1


def test_inputs_untouched(data, tmp_path):
    d, cfg = data
    before = dir_bytes(d)
    main(["pipeline", "--manifest", str(d / "manifest.json"), "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert dir_bytes(d) == before


def test_jobs_env_fallback(data, tmp_path, monkeypatch):
    d, cfg = data
    args = ["pipeline", "--manifest", str(d / "manifest.json"), "--config", str(cfg), "--seed", "5"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("FSDA_JOBS", "3")
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "fsda", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.startswith("fsda ")
