"""Turn dataset samples into network-ready N x C x S x S arrays."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import LabeledDataset
from .imageops import AugmentConfig, apply_augmentations, normalize, to_channels
from .multires import MultiResConfig, apply_multires, degrade
from .rng import Xoshiro256pp


@dataclass(frozen=True)
class InputSpec:
    size: int
    channels: int = 3
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def to_dict(self) -> dict:
        return {"size": self.size, "channels": self.channels, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "InputSpec":
        return cls(int(d["size"]), int(d["channels"]), tuple(d["mean"]), tuple(d["std"]))


def eval_input(ds: LabeledDataset, i: int, spec: InputSpec, resolution: int | None = None) -> np.ndarray:
    """Deterministic view: optional degradation to ``resolution``, resize, normalise."""
    img = to_channels(degrade(ds.image(i), resolution, spec.size), spec.channels)
    img = normalize(img, spec.mean[: spec.channels], spec.std[: spec.channels])
    return img.to_chw()


def eval_inputs(ds: LabeledDataset, indices: Sequence[int] | None, spec: InputSpec,
                resolution: int | None = None) -> np.ndarray:
    idx = range(len(ds)) if indices is None else indices
    return np.stack([eval_input(ds, i, spec, resolution) for i in idx]).astype(np.float32)


def train_inputs(ds: LabeledDataset, indices: Sequence[int], spec: InputSpec, augment: AugmentConfig,
                 seed: int, stage: str, epoch: int, step: int,
                 multires: MultiResConfig | None = None) -> np.ndarray:
    """Augmented batch. Each sample draws from streams keyed by (seed, stage, epoch, index)."""
    out = []
    for i in indices:
        img = ds.image(i)
        if multires is not None:
            img = apply_multires(img, multires, step, Xoshiro256pp.derive(seed, stage, "multires", epoch, i))
        rng = Xoshiro256pp.derive(seed, stage, "augment", epoch, i)
        img = apply_augmentations(img, augment, rng, size=spec.size, channels=spec.channels)
        out.append(img.to_chw())
    return np.stack(out).astype(np.float32)
