import json
import math

import numpy as np
import pytest

from mafer.checkpoint import load_checkpoint
from mafer.config import build_config
from mafer.datasets import SynthSpec, compute_class_weights, generate_synthetic
from mafer.nn import CnnModel
from mafer.training import (
    RunReport,
    StagePlan,
    kfold_evaluate,
    model_config,
    run_mafer,
    split_train_val,
    train_stage,
    train_step1_multires,
)

TINY = {
    "input_size": 16,
    "model": {"in_channels": 1, "channels": [4, 8], "embed_dim": 8},
    "multires": {"min_side": 4, "warmup_steps": 5},
    "data": {"train": {"kind": "synthetic", "synth": {"num_classes": 3, "native_side": 16, "samples_per_class": 8}}},
    "step1": {"batch_size": 8, "validate_every": 5, "patience": 10, "max_steps": 12},
    "step2": {"batch_size": 8, "max_epochs": 3, "lr_classifier": 0.01, "lr_backbone": 0.001},
}


def tiny(*overrides, seed=0):
    return build_config(json.loads(json.dumps(TINY)), list(overrides), seed)


def _ds(cfg):
    s = cfg.data.train.synth
    return generate_synthetic(SynthSpec(**s.model_dump()))


def test_base_mode_has_no_step1_records_and_low_default_lrs():
    cfg = tiny("mode=base", "step2.lr_classifier=null", "step2.lr_backbone=null")
    assert cfg.step2_lrs() == (1e-3, 1e-5)
    _, report = run_mafer(cfg)
    assert report.stage_records("step1") == []
    first = report.stage_records("step2")[0]
    assert (first["lr_cls"], first["lr_bb"]) == (1e-3, 1e-5)


def test_mafer_mode_default_step2_lrs():
    assert tiny("step2.lr_classifier=null", "step2.lr_backbone=null").step2_lrs() == (1e-2, 1e-4)


def test_closed_gate_matches_multires_disabled():
    cfg = tiny("multires.p_max=0")
    train, val = split_train_val(_ds(cfg), None, cfg, "step1")
    a = CnnModel.create(model_config(cfg, 3), seed=1)
    b = CnnModel.create(model_config(cfg, 3), seed=1)
    ra = train_step1_multires(a, cfg, train, val)
    rb = train_step1_multires(b, cfg, train, val, multires=False)
    assert all(np.array_equal(ra.final_state[k], rb.final_state[k]) for k in ra.final_state)


def test_open_gate_changes_trajectory():
    cfg = tiny("multires.p_max=1")
    train, val = split_train_val(_ds(cfg), None, cfg, "step1")
    ra = train_step1_multires(CnnModel.create(model_config(cfg, 3), seed=1), cfg, train, val)
    rb = train_step1_multires(CnnModel.create(model_config(cfg, 3), seed=1), cfg, train, val, multires=False)
    assert not all(np.array_equal(ra.final_state[k], rb.final_state[k]) for k in ra.final_state)


def test_validation_every_200_iterations():
    cfg = tiny("step1.validate_every=200", "step1.max_steps=450", "step1.patience=100000",
               "model.channels=[2,2]", "model.embed_dim=2")
    train, val = split_train_val(_ds(cfg), None, cfg, "step1")
    report = RunReport(config={})
    train_step1_multires(CnnModel.create(model_config(cfg, 3)), cfg, train, val, report)
    steps = [r["step"] for r in report.records if r["split"] == "val"]
    assert steps == [200, 400, 450]


def test_step2_validates_once_per_epoch_and_logs_weights(tmp_path):
    cfg = tiny("data.train.synth.samples_per_class=[8]".replace("[8]", "10"))
    model, report = run_mafer(cfg, out_dir=tmp_path)
    s2 = [r for r in report.stage_records("step2") if r["split"] == "val"]
    assert len(s2) == 3
    task_train, _ = split_train_val(_ds(cfg), None, cfg, "step2")
    expected = {str(c): v for c, v in compute_class_weights(task_train).weights.items()}
    assert report.class_weights["step2"] == expected
    steps = [r["step"] for r in report.records if r["split"] == "val"]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)


def test_checkpoint_handoff_is_bit_identical(tmp_path):
    cfg = tiny()
    run_mafer(cfg, out_dir=tmp_path)
    saved, meta, _ = load_checkpoint(tmp_path / "step1_final.mafk")
    assert meta["stage"] == "step1"
    train, val = split_train_val(_ds(cfg), None, cfg, "step1")
    fresh = CnnModel.create(model_config(cfg, 3), cfg.seed)
    res = train_step1_multires(fresh, cfg, train, val)
    assert all(np.array_equal(saved.params[k].data, res.final_state[k]) for k in res.final_state)


def test_best_validation_state_is_restored(tmp_path):
    cfg = tiny()
    model, report = run_mafer(cfg, out_dir=tmp_path)
    best, _, _ = load_checkpoint(tmp_path / "step2_best.mafk")
    assert all(np.array_equal(best.params[k].data, model.params[k].data) for k in model.params)
    s2_val = [r["acc"] for r in report.stage_records("step2") if r["split"] == "val"]
    assert report.final_metrics["best_val_metric"] == max(s2_val)


def test_lr_drops_are_exact_tenfold_on_both_groups():
    cfg = tiny("mode=base", "step2.patience=1", "step2.max_epochs=12", "lr_floor=1e-9")
    _, report = run_mafer(cfg)
    trace = [(r["lr_cls"], r["lr_bb"]) for r in report.records if r["split"] == "val"]
    drops = 0
    for (c0, b0), (c1, b1) in zip(trace, trace[1:]):
        rc, rb = c1 / c0, b1 / b0
        assert rc <= 1 and rb <= 1
        assert math.isclose(rc, rb)
        if rc < 1:
            drops += 1
            assert math.isclose(rc, 0.1)
    assert drops >= 1


def test_lr_floor_stops_training():
    cfg = tiny("mode=base", "step2.patience=1", "step2.max_epochs=200", "lr_floor=1e-4")
    _, report = run_mafer(cfg)
    # the last record is written just before the drop that crosses the floor
    last = report.records[-1]
    assert math.isclose(last["lr_bb"], 1e-4)
    assert len([r for r in report.records if r["split"] == "val"]) < 200


def test_four_samples_overfit():
    cfg = tiny("augment.flip_prob=0", "augment.grayscale_prob=0", "augment.jitter_prob=0",
               "augment.perspective_prob=0")
    ds = generate_synthetic(SynthSpec(num_classes=2, native_side=16, samples_per_class=2, seed=5))
    model = CnnModel.create(model_config(cfg, 2), seed=0)
    report = RunReport(config={})
    plan = StagePlan("step1", 1e-2, 1e-2, 0.0, batch_size=4, patience=10 ** 6, validate_every=10, max_steps=500)
    train_stage(model, ds, ds, plan, cfg, report)
    losses = [r["loss"] for r in report.records if r["split"] == "train"]
    assert min(losses) < 0.01


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_loss_aborts():
    from mafer.training import TrainingDivergedError

    cfg = tiny("mode=base", "step2.lr_classifier=1e30", "step2.lr_backbone=1e30")
    with pytest.raises((TrainingDivergedError, FloatingPointError)):
        run_mafer(cfg)


@pytest.mark.slow
def test_kfold_two_folds_on_separable_set():
    # learned features on a few dozen images vary across seeds; this seed is pinned
    cfg = tiny("mode=base", "input_size=32", "data.train.synth.native_side=32", "model.channels=[16,32,64]",
               "model.embed_dim=64", "step2.batch_size=16", "step2.max_epochs=40",
               "data.train.synth.samples_per_class=40", seed=0)
    res = kfold_evaluate(cfg, _ds(cfg), k=2)
    assert len(res.fold_accuracies) == 2
    assert min(res.fold_accuracies) > 0.9
    assert sorted(i for f in res.folds for i in f) == list(range(120))
