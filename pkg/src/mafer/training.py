"""Two-step training: multi-resolution pretraining, then single-resolution task fine-tuning."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DatasetRef, RunConfig
from .datasets import (
    LabeledDataset,
    SynthSpec,
    compute_class_weights,
    generate_synthetic,
    load_fer2013_csv,
    load_image_directory,
    batches,
    kfold_split,
    stratified_holdout,
)
from .evaluation import KfoldResult, average_accuracy, confusion, mean_sd, overall_accuracy
from .imageops import AugmentConfig
from .multires import CurriculumSchedule, MultiResConfig
from .nn import CnnModel, ModelConfig, he_uniform
from .optim import Adam, ParamGroup, PlateauScheduler
from .pipeline import InputSpec, eval_inputs, train_inputs
from .rng import Xoshiro256pp, derive_seed
from .tensor import Tensor, weighted_cross_entropy


class TrainingDivergedError(RuntimeError):
    pass


def resolve_dataset(ref: DatasetRef, split_tag: str = "train") -> LabeledDataset:
    if ref.kind == "synthetic":
        return generate_synthetic(SynthSpec(**ref.synth.model_dump()), split_tag)
    if ref.kind == "directory":
        return load_image_directory(ref.path, split_tag)
    return load_fer2013_csv(ref.path, ref.usage)


def input_spec(cfg: RunConfig) -> InputSpec:
    c = cfg.model.in_channels
    return InputSpec(cfg.input_size, c, tuple(cfg.augment.normalize_mean[:c]), tuple(cfg.augment.normalize_std[:c]))


def augment_config(cfg: RunConfig) -> AugmentConfig:
    return AugmentConfig(**cfg.augment.model_dump())


def model_config(cfg: RunConfig, num_classes: int) -> ModelConfig:
    return ModelConfig(cfg.model.in_channels, tuple(cfg.model.channels), cfg.model.embed_dim, num_classes)


def predict_labels(model: CnnModel, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    logits, _ = model.predict(x, batch_size)
    return logits.argmax(axis=1)


@dataclass
class StagePlan:
    name: str
    lr_classifier: float
    lr_backbone: float
    weight_decay: float
    batch_size: int
    patience: int  # in validation events
    validate_every: int | None  # iterations; None = once per epoch
    max_steps: int | None = None
    max_epochs: int | None = None
    multires: MultiResConfig | None = None


@dataclass
class StageResult:
    best_state: dict
    final_state: dict
    best_metric: float
    steps: int
    class_weights: dict


@dataclass
class RunReport:
    config: dict
    records: list[dict] = field(default_factory=list)
    class_weights: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        # wall clock lives in the manifest so the report is reproducible byte for byte
        return {
            "config": self.config,
            "class_weights": self.class_weights,
            "records": self.records,
            "final_metrics": self.final_metrics,
            "checkpoints": self.checkpoints,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def stage_records(self, stage: str) -> list[dict]:
        return [r for r in self.records if r["stage"] == stage]


def _score(preds, labels, num_classes, metric: str) -> float:
    if metric == "average":
        present = np.unique(labels)
        if len(present) < num_classes:
            return overall_accuracy(preds, labels)
        return average_accuracy(preds, labels, num_classes)[0]
    return overall_accuracy(preds, labels)


def train_stage(model: CnnModel, train: LabeledDataset, val: LabeledDataset, plan: StagePlan, cfg: RunConfig,
                report: RunReport, step_offset: int = 0,
                progress: Callable[[dict], None] | None = None) -> StageResult:
    """Generic loop shared by both steps: weighted CE, two-group Adam, plateau drops on validation accuracy."""
    spec = input_spec(cfg)
    aug = augment_config(cfg)
    weights = compute_class_weights(train)
    w = weights.as_array()
    groups = [
        ParamGroup("classifier", model.classifier_params(), plan.lr_classifier, plan.weight_decay),
        ParamGroup("backbone", model.backbone_params(), plan.lr_backbone, plan.weight_decay),
    ]
    opt = Adam(model.params, groups)
    sched = PlateauScheduler(opt, plan.patience)
    val_x = eval_inputs(val, None, spec)
    val_y = val.labels
    train_y = train.labels
    stage_seed = derive_seed(cfg.seed, plan.name)

    state = {"step": 0, "best": -math.inf, "best_state": model.state_dict(), "stop": False,
             "run_loss": 0.0, "run_correct": 0, "run_n": 0}

    def validate():
        logits, _ = model.predict(val_x)
        preds = logits.argmax(axis=1)
        vloss = float(weighted_cross_entropy(Tensor(logits), val_y, np.ones(model.config.num_classes)).data)
        acc = _score(preds, val_y, model.config.num_classes, cfg.val_metric)
        gstep = step_offset + state["step"]
        lrs = opt.lrs
        n = max(state["run_n"], 1)
        recs = [
            {"stage": plan.name, "step": gstep, "split": "train", "loss": state["run_loss"] / n,
             "acc": state["run_correct"] / n, "lr_cls": lrs["classifier"], "lr_bb": lrs["backbone"]},
            {"stage": plan.name, "step": gstep, "split": "val", "loss": vloss, "acc": acc,
             "lr_cls": lrs["classifier"], "lr_bb": lrs["backbone"]},
        ]
        state["run_loss"], state["run_correct"], state["run_n"] = 0.0, 0, 0
        for r in recs:
            report.records.append(r)
            if progress:
                progress(r)
        if acc > state["best"]:
            state["best"] = acc
            state["best_state"] = model.state_dict()
        sched.observe(acc)
        if min(opt.lrs.values()) < cfg.lr_floor:
            state["stop"] = True

    epoch = 0
    while not state["stop"]:
        for idx in batches(len(train), plan.batch_size, epoch, stage_seed):
            x = train_inputs(train, idx, spec, aug, cfg.seed, plan.name, epoch, state["step"], plan.multires)
            y = train_y[idx]
            model.zero_grad()
            logits, _ = model(Tensor(x))
            loss = weighted_cross_entropy(logits, y, w)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDivergedError(
                    f"{plan.name}: loss became {lv} at iteration {state['step']} (lrs {opt.lrs})")
            loss.backward()
            opt.step()
            state["step"] += 1
            state["run_loss"] += lv * len(idx)
            state["run_correct"] += int((logits.data.argmax(axis=1) == y).sum())
            state["run_n"] += len(idx)
            if plan.validate_every and state["step"] % plan.validate_every == 0:
                validate()
            if state["stop"] or (plan.max_steps is not None and state["step"] >= plan.max_steps):
                state["stop"] = True
                break
        epoch += 1
        if plan.validate_every is None and not state["stop"]:
            validate()
        if plan.max_epochs is not None and epoch >= plan.max_epochs:
            state["stop"] = True
    if plan.validate_every and state["step"] % plan.validate_every != 0 and state["run_n"]:
        validate()
    return StageResult(state["best_state"], model.state_dict(), state["best"], state["step"],
                       {str(c): v for c, v in weights.weights.items()})


def split_train_val(train: LabeledDataset, val_ref: DatasetRef | None, cfg: RunConfig, tag: str):
    if val_ref is not None:
        return train, resolve_dataset(val_ref, "val")
    keep, hold = stratified_holdout(train, cfg.data.val_fraction, derive_seed(cfg.seed, tag, "holdout"))
    return train.subset(keep, "train"), train.subset(hold, "val")


def _multires_config(cfg: RunConfig, steps_per_epoch: int) -> MultiResConfig:
    mr = cfg.multires
    warm = mr.warmup_steps or max(1, steps_per_epoch)
    return MultiResConfig(CurriculumSchedule(mr.p_max, warm), mr.min_side, cfg.input_size, mr.law)


def step1_plan(cfg: RunConfig, n_train: int, multires: bool = True) -> StagePlan:
    s = cfg.step1
    per_epoch = math.ceil(n_train / s.batch_size)
    return StagePlan("step1", s.lr_classifier, s.lr_backbone, s.weight_decay, s.batch_size,
                     patience=max(1, s.patience // s.validate_every), validate_every=s.validate_every,
                     max_steps=s.max_steps, multires=_multires_config(cfg, per_epoch) if multires else None)


def step2_plan(cfg: RunConfig) -> StagePlan:
    s = cfg.step2
    lr_cls, lr_bb = cfg.step2_lrs()
    return StagePlan("step2", lr_cls, lr_bb, s.weight_decay, s.batch_size, patience=s.patience,
                     validate_every=None, max_epochs=s.max_epochs)


def train_step1_multires(model: CnnModel, cfg: RunConfig, train: LabeledDataset, val: LabeledDataset,
                         report: RunReport | None = None, progress=None, multires: bool = True) -> StageResult:
    """Multi-resolution pretraining; ``multires=False`` gives the same loop without the degradation gate."""
    report = report if report is not None else RunReport(config=cfg.to_dict())
    return train_stage(model, train, val, step1_plan(cfg, len(train), multires), cfg, report, 0, progress)


def train_step2_task(model: CnnModel, cfg: RunConfig, train: LabeledDataset, val: LabeledDataset,
                     report: RunReport | None = None, step_offset: int = 0, progress=None) -> StageResult:
    """Single-resolution fine-tuning with per-epoch validation."""
    report = report if report is not None else RunReport(config=cfg.to_dict())
    return train_stage(model, train, val, step2_plan(cfg), cfg, report, step_offset, progress)


def evaluate_model(model: CnnModel, ds: LabeledDataset, cfg: RunConfig, resolution: int | None = None,
                   spec: InputSpec | None = None) -> dict:
    x = eval_inputs(ds, None, spec or input_spec(cfg), resolution)
    preds = predict_labels(model, x, cfg.eval.batch_size)
    y = ds.labels
    cm = confusion(preds, y, ds.num_classes, ds.class_names)
    out = {"n": len(ds), "overall_accuracy": overall_accuracy(preds, y), "confusion": cm.counts.tolist()}
    try:
        mean, sd = average_accuracy(preds, y, ds.num_classes)
        out["average_accuracy"] = {"mean": mean, "sd": sd}
    except ValueError:
        out["average_accuracy"] = None
    return out


def _reset_classifier(model: CnnModel, num_classes: int, seed: int) -> CnnModel:
    """New classifier head when the task dataset has a different class count."""
    cfg = ModelConfig(model.config.in_channels, model.config.channels, model.config.embed_dim, num_classes)
    rng = Xoshiro256pp.derive(seed, "head")
    dtype = model.params["classifier.weight"].dtype
    state = model.state_dict()
    state["classifier.weight"] = he_uniform(rng, (num_classes, cfg.embed_dim), cfg.embed_dim, dtype)
    state["classifier.bias"] = np.zeros(num_classes, dtype=dtype)
    new = CnnModel.create(cfg, seed)
    new.load_state_dict(state)
    return new


def run_mafer(cfg: RunConfig, out_dir=None, progress: Callable[[dict], None] | None = None,
              train_ds: LabeledDataset | None = None, test_ds: LabeledDataset | None = None,
              step1_ds: LabeledDataset | None = None) -> tuple[CnnModel, RunReport]:
    """Run the configured mode. Returns the best-on-validation step-2 model and the report.

    Datasets may be passed in directly (k-fold does this); otherwise they are
    resolved from ``cfg.data``.
    """
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = RunReport(config=cfg.to_dict())
    spec = input_spec(cfg)

    if train_ds is None:
        if cfg.data.train is None:
            raise ValueError("data.train is not configured")
        train_ds = resolve_dataset(cfg.data.train, "train")
    if test_ds is None and cfg.data.test is not None:
        test_ds = resolve_dataset(cfg.data.test, "test")
    task_train, task_val = split_train_val(train_ds, cfg.data.val, cfg, "step2")

    model = None
    step_offset = 0
    if cfg.mode == "mafer_simplified":
        if step1_ds is None:
            step1_ds = resolve_dataset(cfg.step1.data, "train") if cfg.step1.data is not None else train_ds
        s1_train, s1_val = split_train_val(step1_ds, cfg.step1.val, cfg, "step1")
        model = CnnModel.create(model_config(cfg, s1_train.num_classes), cfg.seed)
        res1 = train_step1_multires(model, cfg, s1_train, s1_val, report, progress)
        report.class_weights["step1"] = res1.class_weights
        step_offset = res1.steps
        meta = {"stage": "step1", "input": spec.to_dict(), "class_names": s1_train.class_names}
        if out is not None:
            path = save_checkpoint(model, out / "step1_final.mafk", meta=meta)
            report.checkpoints["step1_final"] = path.name
            model, _, _ = load_checkpoint(path)
        if model.config.num_classes != task_train.num_classes:
            model = _reset_classifier(model, task_train.num_classes, cfg.seed)
    else:
        model = CnnModel.create(model_config(cfg, task_train.num_classes), cfg.seed)

    res2 = train_step2_task(model, cfg, task_train, task_val, report, step_offset, progress)
    report.class_weights["step2"] = res2.class_weights
    meta = {"stage": "step2", "input": spec.to_dict(), "class_names": task_train.class_names}
    if out is not None:
        report.checkpoints["step2_final"] = save_checkpoint(model, out / "step2_final.mafk", meta=meta).name
    model.load_state_dict(res2.best_state)
    if out is not None:
        report.checkpoints["step2_best"] = save_checkpoint(model, out / "step2_best.mafk", meta=meta).name

    report.final_metrics["best_val_metric"] = res2.best_metric
    report.final_metrics["steps"] = step_offset + res2.steps
    if test_ds is not None:
        report.final_metrics["test"] = evaluate_model(model, test_ds, cfg)
    report.wall_clock_s = time.perf_counter() - t0
    if out is not None:
        (out / "run_report.json").write_text(report.to_json())
    return model, report


def kfold_evaluate(cfg, ds, k: int = 10, progress=None) -> KfoldResult:
    """Train a fresh model per fold on the other k-1 folds and score the held-out one."""
    plan = kfold_split(ds, k, cfg.seed)
    accs = []
    for f in range(k):
        fold_cfg = cfg.model_copy(update={"seed": derive_seed(cfg.seed, "fold", f)})
        train = ds.subset(plan.train_indices(f), "train")
        test = ds.subset(plan.test_indices(f), "test")
        model, _ = run_mafer(fold_cfg, train_ds=train, test_ds=None)
        acc = evaluate_model(model, test, cfg)["overall_accuracy"]
        accs.append(acc)
        if progress:
            progress({"fold": f, "n_test": len(test), "acc": acc})
    mean, sd = mean_sd(accs)
    return KfoldResult(accs, mean, sd, plan.folds())
