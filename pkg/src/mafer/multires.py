"""Curriculum multi-resolution transform.

Two draws per image: the first decides whether to degrade it (against a
probability that grows with the training step), the second picks the target
shortest side. Images are never upsampled past their native resolution, and
degraded images are brought back to the fixed network input size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .imageops import ImageBuffer, bilinear_resize, resize_shortest_side
from .rng import Xoshiro256pp


@dataclass(frozen=True)
class CurriculumSchedule:
    p_max: float = 0.75
    warmup_steps: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError(f"p_max={self.p_max} is not a probability")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


@dataclass(frozen=True)
class MultiResConfig:
    schedule: CurriculumSchedule = CurriculumSchedule()
    min_side: int = 16
    network_input: int = 64
    law: str = "uniform"
    cap: int | None = None

    def __post_init__(self):
        if self.min_side < 1:
            raise ValueError("min_side must be >= 1")
        if self.min_side > self.max_side:
            raise ValueError(f"min_side {self.min_side} exceeds cap {self.max_side}")
        if self.law not in ("uniform", "log_uniform"):
            raise ValueError(f"unknown resolution law {self.law!r}")

    @property
    def max_side(self) -> int:
        return self.cap if self.cap is not None else self.network_input


def curriculum_prob(sched: CurriculumSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be >= 0")
    return sched.p_max * min(1.0, t / sched.warmup_steps)


def sample_target_resolution(cfg: MultiResConfig, rng: Xoshiro256pp) -> int:
    lo, hi = cfg.min_side, cfg.max_side
    if cfg.law == "uniform":
        return rng.randint(lo, hi)
    r = math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))
    return min(hi, max(lo, int(r)))


def degrade(img: ImageBuffer, resolution: int | None, out_size: int) -> ImageBuffer:
    """Downsample to shortest side ``resolution`` and restore to ``out_size`` square.

    ``None`` or a resolution at/above the native one skips the degradation.
    """
    native = img.native_shortest_side or img.shortest_side
    if resolution is None or resolution >= native:
        return bilinear_resize(img, out_size, out_size)
    low = resize_shortest_side(img, resolution)
    return bilinear_resize(low, out_size, out_size)


def apply_multires(img: ImageBuffer, cfg: MultiResConfig, t: int, rng: Xoshiro256pp,
                   resolution: int | None = None) -> ImageBuffer:
    """Curriculum-gated degradation; output is always network_input x network_input.

    Both draws are consumed on every call. ``resolution`` overrides the
    second draw (the draw still happens).
    """
    u = rng.random()
    r = sample_target_resolution(cfg, rng)
    if resolution is not None:
        r = resolution
    if u < curriculum_prob(cfg.schedule, t):
        return degrade(img, r, cfg.network_input)
    return degrade(img, None, cfg.network_input)
