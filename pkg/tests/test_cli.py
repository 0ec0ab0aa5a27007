import json

import numpy as np
import pytest

from mafer.cli import main
from mafer.datasets import FER2013_CLASSES
from mafer.evaluation import features_to_csv

TRAIN_CFG = {
    "input_size": 16,
    "model": {"in_channels": 1, "channels": [4, 8], "embed_dim": 8},
    "multires": {"min_side": 4, "warmup_steps": 5},
    "data": {
        "train": {"kind": "synthetic", "synth": {"num_classes": 3, "native_side": 16, "samples_per_class": 8}},
        "test": {"kind": "synthetic", "synth": {"num_classes": 3, "native_side": 16, "samples_per_class": 6, "seed": 9}},
    },
    "step1": {"batch_size": 8, "validate_every": 5, "max_steps": 10},
    "step2": {"batch_size": 8, "max_epochs": 2},
    "cbir": {"queries_per_class": 2, "ks": [1, 3]},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TRAIN_CFG))
    return path


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_key_is_rejected(tmp_path, capsys):
    assert main(["train", "--set", "step1.learning_rate=0.1", "--out", str(tmp_path)]) == 2
    err = _err(capsys)
    assert err["error"] == "config" and "learning_rate" in err["message"]


def test_all_config_problems_reported_at_once(tmp_path, capsys):
    assert main(["train", "--set", "multires.p_max=2", "--set", "step1.batch_size=0", "--out", str(tmp_path)]) == 2
    details = _err(capsys)["details"]
    assert len(details) == 2


def test_missing_dataset_path_exits_2(tmp_path, capsys):
    code = main(["train", "--set", "data.train.kind=directory", "--set", f"data.train.path={tmp_path / 'nope'}",
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "does not exist" in _err(capsys)["message"]


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_bad_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_weights_from_counts(tmp_path, capsys):
    counts = tmp_path / "counts.csv"
    counts.write_text("class,count\nanger,3995\ndisgust,436\nfear,4097\nhappiness,7215\n"
                      "sadness,4830\nsurprise,3171\nneutral,4965\n")
    assert main(["weights", "--counts", str(counts), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "weights.csv").read_text().splitlines()
    assert lines[0] == "class,count,weight"
    assert lines[4] == "happiness,7215,0.749"
    assert "disgust,436,0.985" in capsys.readouterr().out


def test_weights_of_balanced_synthetic(tmp_path, capsys):
    assert main(["weights", "--set", "data.train.kind=synthetic", "--set", "data.train.synth.samples_per_class=3",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "weights.csv").read_text().splitlines()[1:]
    assert len(rows) == 6 and all(r.endswith(",0.833") for r in rows)


def test_synth_checksums_and_tamper(tmp_path, capsys):
    args = ["synth", "--set", "synth.samples_per_class=3", "--set", "synth.native_side=16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "synth_manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "synth_manifest.json").read_text())
    assert ma["files"] == mb["files"] and ma["num_classes"] == 6
    assert len(ma["files"]) == 18
    assert main(["synth", "--verify", str(tmp_path / "a"), "--out", str(tmp_path / "v")]) == 0
    (tmp_path / "a" / "00_lobes2" / "img_00001.pgm").unlink()
    assert main(["synth", "--verify", str(tmp_path / "a"), "--out", str(tmp_path / "v")]) == 1
    assert "missing: 00_lobes2/img_00001.pgm" in capsys.readouterr().out


def test_synth_directory_loads_back(tmp_path, capsys):
    assert main(["synth", "--set", "synth.samples_per_class=2", "--set", "synth.native_side=16", "--out",
                 str(tmp_path / "ds")]) == 0
    assert main(["weights", "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "w")]) == 0
    assert "00_lobes2,2,0.833" in (tmp_path / "w" / "weights.csv").read_text()


def test_train_eval_extract_cbir(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert stdout.splitlines()[0] == "step,split,loss,acc,lr_cls,lr_bb"
    report = json.loads((out / "run_report.json").read_text())
    assert report["config"]["step1"]["max_steps"] == 10
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"run_report.json", "step1_final.mafk", "step2_final.mafk", "step2_best.mafk"}
    assert "created_utc" in manifest and "created_utc" not in report

    ckpt = str(out / "step2_best.mafk")
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", ckpt, "--resolutions", "8,native",
                 "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics_eval.json").read_text())
    assert [b["resolution"] for b in metrics["results"]] == [8, "native"]
    assert (tmp_path / "ev" / "confusion_native.csv").exists()
    native = metrics["results"][1]
    assert native["overall_accuracy"] == report["final_metrics"]["test"]["overall_accuracy"]

    assert main(["extract", "--config", str(cfg_file), "--checkpoint", ckpt, "--out", str(tmp_path / "ex")]) == 0
    lines = (tmp_path / "ex" / "features.csv").read_text().splitlines()
    assert len(lines) == 1 + 18 and lines[0].startswith("sample_id,label,f0,")

    assert main(["cbir", "--config", str(cfg_file), "--checkpoint", ckpt, "--out", str(tmp_path / "cb")]) == 0
    body = json.loads((tmp_path / "cb" / "metrics_cbir.json").read_text())
    assert body["num_queries"] == 6 and 0 <= body["map"]["mean"] <= 1
    # this barely trained head gets no class-0 sample right, which the classifier switch reports
    capsys.readouterr()
    assert main(["cbir", "--config", str(cfg_file), "--checkpoint", ckpt, "--set", "cbir.eligibility=classifier",
                 "--out", str(tmp_path / "cb2")]) == 1
    assert "class 0" in _err(capsys)["message"]


def test_cbir_on_one_hot_features(tmp_path, capsys):
    y = np.repeat(np.arange(3), 10)
    (tmp_path / "f.csv").write_text(features_to_csv(np.eye(3)[y], y))
    assert main(["cbir", "--features", str(tmp_path / "f.csv"), "--set", "cbir.queries_per_class=4",
                 "--set", "cbir.ks=[1,5]", "--out", str(tmp_path / "o")]) == 0
    body = json.loads((tmp_path / "o" / "metrics_cbir.json").read_text())
    assert body["map"]["mean"] == 1.0 and body["num_queries"] == 12


def test_eval_checkpoint_class_mismatch(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--set", "mode=base", "--out", str(out)]) == 0
    code = main(["eval", "--config", str(cfg_file), "--checkpoint", str(out / "step2_best.mafk"),
                 "--set", "data.test.synth.num_classes=4", "--out", str(tmp_path / "ev")])
    assert code == 1
    assert _err(capsys)["error"] == "EvaluationError"


def test_corrupt_checkpoint_exits_1(tmp_path, cfg_file, capsys):
    (tmp_path / "bad.mafk").write_bytes(b"garbage")
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", str(tmp_path / "bad.mafk"),
                 "--out", str(tmp_path / "o")]) == 1
    assert _err(capsys)["error"] == "NotACheckpointError"


def test_threads_flag_does_not_change_results(tmp_path, cfg_file, capsys):
    for name, extra in (("a", []), ("b", ["--threads", "1"])):
        assert main(["train", "--config", str(cfg_file), "--set", "mode=base", "--out", str(tmp_path / name)] + extra) == 0
    assert (tmp_path / "a" / "step2_final.mafk").read_bytes() == (tmp_path / "b" / "step2_final.mafk").read_bytes()
