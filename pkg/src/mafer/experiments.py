"""The resolution-robustness comparison on synthetic glyphs: base vs two-step training.

Both arms see 300 training glyphs at native 64 px and get the same
400-iteration budget. The two-step arm spends 300 of them on
multi-resolution pretraining and 100 on fine-tuning.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from .config import RunConfig, build_config
from .datasets import SynthSpec, generate_synthetic
from .evaluation import run_cbir
from .training import evaluate_model, input_spec, resolve_dataset, run_mafer

TEST_RESOLUTIONS = (None, 32, 24, 16)
CBIR_QUERY_RESOLUTION = 16


def _synth(seed: int, per_class: int) -> dict:
    return {"kind": "synthetic", "synth": {"samples_per_class": per_class, "native_side": 64, "seed": seed}}


def flagship_raw(mode: str, seed: int) -> dict:
    raw = {
        "seed": seed,
        "mode": mode,
        "input_size": 32,
        "data": {"train": _synth(1000 + seed, 50), "val": _synth(2000 + seed, 10), "test": _synth(3000 + seed, 20)},
        "multires": {"p_max": 0.75, "warmup_steps": 100, "min_side": 16},
        "step1": {"max_steps": 300, "validate_every": 50, "patience": 200},
        "step2": {"lr_classifier": 1e-2, "lr_backbone": 1e-3, "patience": 10,
                  "max_epochs": 10 if mode == "mafer_simplified" else 40},
    }
    return raw


def flagship_config(mode: str, seed: int, overrides=()) -> RunConfig:
    return build_config(flagship_raw(mode, seed), list(overrides))


def cbir_dataset(seed: int):
    """Separate 50-per-class pool so 120 queries still leave a 180-image gallery."""
    return generate_synthetic(SynthSpec(samples_per_class=50, native_side=64, seed=4000 + seed), "test")


@dataclass
class ArmResult:
    mode: str
    seed: int
    accuracy: dict = field(default_factory=dict)  # resolution label -> overall accuracy
    cbir_map: float = 0.0
    cbir_queries: int = 0
    steps: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def run_arm(mode: str, seed: int, out_dir=None) -> tuple[object, ArmResult]:
    t0 = time.perf_counter()
    cfg = flagship_config(mode, seed)
    model, report = run_mafer(cfg, out_dir)
    test = resolve_dataset(cfg.data.test, "test")
    res = ArmResult(mode, seed, steps=report.final_metrics["steps"])
    for r in TEST_RESOLUTIONS:
        res.accuracy["native" if r is None else str(r)] = evaluate_model(model, test, cfg, r)["overall_accuracy"]
    rep = run_cbir(model, cbir_dataset(seed), input_spec(cfg), queries_per_class=20, seed=seed,
                   query_resolution=CBIR_QUERY_RESOLUTION)
    res.cbir_map, res.cbir_queries = rep.map[0], rep.num_queries
    res.wall_clock_s = time.perf_counter() - t0
    return model, res
