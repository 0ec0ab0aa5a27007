"""Run configuration: JSON file plus dotted ``--set key=value`` overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Strict):
    num_classes: int = Field(6, ge=1)
    native_side: int = Field(64, ge=4)
    samples_per_class: int = Field(50, ge=1)
    noise_sigma: float = Field(0.05, ge=0)
    seed: int = 0


class DatasetRef(_Strict):
    kind: Literal["synthetic", "directory", "fer2013"]
    path: Optional[str] = None
    usage: Literal["Training", "PublicTest", "PrivateTest"] = "Training"
    synth: Optional[SynthSection] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("directory", "fer2013") and not self.path:
            raise ValueError(f"dataset kind {self.kind!r} needs a path")
        if self.kind == "synthetic" and self.synth is None:
            self.synth = SynthSection()
        return self


class ModelSection(_Strict):
    in_channels: Literal[1, 3] = 3
    channels: list[int] = [16, 32, 64]
    embed_dim: int = Field(64, ge=1)


class DataSection(_Strict):
    train: Optional[DatasetRef] = None
    val: Optional[DatasetRef] = None
    test: Optional[DatasetRef] = None
    val_fraction: float = Field(0.2, gt=0, lt=1)


class MultiresSection(_Strict):
    p_max: float = Field(0.75, ge=0, le=1)
    warmup_steps: Optional[int] = Field(None, ge=1)
    min_side: int = Field(16, ge=1)
    law: Literal["uniform", "log_uniform"] = "uniform"


class AugmentSection(_Strict):
    flip_prob: float = Field(0.5, ge=0, le=1)
    grayscale_prob: float = Field(0.2, ge=0, le=1)
    jitter_prob: float = Field(0.5, ge=0, le=1)
    jitter_strength: float = Field(0.2, ge=0, lt=1)
    perspective_prob: float = Field(0.5, ge=0, le=1)
    perspective_distortion: float = Field(0.2, ge=0, lt=0.5)
    normalize_mean: list[float] = [0.5, 0.5, 0.5]
    normalize_std: list[float] = [0.5, 0.5, 0.5]

    @field_validator("normalize_std")
    @classmethod
    def _positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("every normalize_std component must be > 0")
        return v


class Step1Section(_Strict):
    data: Optional[DatasetRef] = None
    val: Optional[DatasetRef] = None
    lr_classifier: float = Field(1e-2, gt=0)
    lr_backbone: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    validate_every: int = Field(200, ge=1)
    patience: int = Field(2000, ge=1)
    max_steps: int = Field(2000, ge=1)


class Step2Section(_Strict):
    lr_classifier: Optional[float] = Field(None, gt=0)
    lr_backbone: Optional[float] = Field(None, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    patience: int = Field(10, ge=1)
    max_epochs: int = Field(30, ge=1)


class EvalSection(_Strict):
    resolutions: list[int | Literal["native"]] = [16, 24, 32, "native"]
    batch_size: int = Field(64, ge=1)


class CbirSection(_Strict):
    queries_per_class: int = Field(20, ge=1)
    ks: list[int] = [1, 5, 10, 50, 100]
    knn_k: int = Field(3, ge=1)
    query_resolution: Optional[int] = Field(None, ge=1)
    eligibility: Literal["knn", "classifier"] = "knn"
    eligibility_view: Literal["native", "query"] = "native"


class KfoldSection(_Strict):
    k: int = Field(10, ge=2)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    mode: Literal["base", "mafer_simplified"] = "mafer_simplified"
    input_size: int = Field(64, ge=1)
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    step1: Step1Section = Step1Section()
    step2: Step2Section = Step2Section()
    multires: MultiresSection = MultiresSection()
    augment: AugmentSection = AugmentSection()
    lr_floor: float = Field(1e-6, gt=0)
    val_metric: Literal["overall", "average"] = "overall"
    eval: EvalSection = EvalSection()
    cbir: CbirSection = CbirSection()
    kfold: KfoldSection = KfoldSection()
    synth: SynthSection = SynthSection()

    @model_validator(mode="after")
    def _check(self):
        m = 2 ** len(self.model.channels)
        problems = []
        if self.input_size % m:
            problems.append(f"input_size {self.input_size} must be a multiple of {m} for {len(self.model.channels)} blocks")
        if self.multires.min_side > self.input_size:
            problems.append(f"multires.min_side {self.multires.min_side} exceeds input_size {self.input_size}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def step2_lrs(self) -> tuple[float, float]:
        """(classifier, backbone); base mode defaults to the lower pair."""
        default = (1e-3, 1e-5) if self.mode == "base" else (1e-2, 1e-4)
        return (self.step2.lr_classifier or default[0], self.step2.lr_backbone or default[1])

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(raw)
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            elif not isinstance(nxt, dict):
                problems.append(f"override {key!r}: {p!r} is not a section")
                break
            node = nxt
        else:
            node[parts[-1]] = parse_value(value)
    if problems:
        raise ConfigError(problems)
    return out


def build_config(raw: dict | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    raw = apply_overrides(raw or {}, list(overrides))
    if seed is not None:
        raw["seed"] = seed
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError([f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]) from None


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from None
    return build_config(raw, overrides, seed)
