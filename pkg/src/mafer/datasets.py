"""Dataset ingestion, class weights, k-fold plans and seeded batching."""
from __future__ import annotations

import csv
import functools
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imageops import ImageBuffer, read_pnm
from .rng import Xoshiro256pp, derive_seed

log = logging.getLogger(__name__)

FER2013_CLASSES = ["anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral"]
FER2013_USAGES = ("Training", "PublicTest", "PrivateTest")
FER2013_SIDE = 48


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    label: int
    load: Callable[[], ImageBuffer]
    subject: int | None = None
    native_side: int | None = None
    source: str = ""


class LabeledDataset:
    """Immutable list of labelled samples with an LRU decode cache."""

    def __init__(self, samples: Sequence[Sample], class_names: Sequence[str], split_tag: str = "train",
                 cache_size: int = 4096):
        if not samples:
            raise DatasetError("dataset is empty")
        self.samples = list(samples)
        self.class_names = list(class_names)
        self.split_tag = split_tag
        for i, s in enumerate(self.samples):
            if not 0 <= s.label < len(self.class_names):
                raise DatasetError(f"sample {i} has label {s.label} outside [0, {len(self.class_names)})")
        self.cache_size = cache_size
        self._cached = functools.lru_cache(maxsize=cache_size)(self._decode)

    def _decode(self, i: int) -> ImageBuffer:
        return self.samples[i].load()

    def __len__(self) -> int:
        return len(self.samples)

    def image(self, i: int) -> ImageBuffer:
        return self._cached(i)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def subjects(self) -> list[int | None]:
        return [s.subject for s in self.samples]

    @property
    def has_subjects(self) -> bool:
        return all(s.subject is not None for s in self.samples)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, indices: Sequence[int], split_tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset([self.samples[i] for i in indices], self.class_names,
                              split_tag or self.split_tag, self.cache_size)


# FER2013 -----------------------------------------------------------------------

def _fer_loader(raw: np.ndarray):
    def load():
        return ImageBuffer((raw.astype(np.float32) / 255.0).reshape(FER2013_SIDE, FER2013_SIDE, 1),
                           native_shortest_side=FER2013_SIDE)
    return load


def load_fer2013_csv(path, usage: str = "Training", cache_size: int = 4096) -> LabeledDataset:
    """Rows of ``emotion,pixels,Usage``; pixel strings are validated eagerly, decoded lazily."""
    if usage not in FER2013_USAGES:
        raise DatasetError(f"usage must be one of {FER2013_USAGES}, got {usage!r}")
    n_px = FER2013_SIDE * FER2013_SIDE
    samples = []
    split = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}[usage]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["emotion", "pixels", "Usage"]:
            raise DatasetError(f"{path}: missing header 'emotion,pixels,Usage'")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise DatasetError(f"{path}: row {rowno}: expected 3 fields, got {len(row)}")
            if row[2].strip() != usage:
                continue
            try:
                label = int(row[0])
            except ValueError:
                raise DatasetError(f"{path}: row {rowno}: emotion {row[0]!r} is not an integer") from None
            if not 0 <= label < len(FER2013_CLASSES):
                raise DatasetError(f"{path}: row {rowno}: emotion {label} not in [0, 7)")
            values = row[1].split()
            if len(values) != n_px:
                raise DatasetError(f"{path}: row {rowno}: expected {n_px} pixel values, got {len(values)}")
            try:
                px = np.array(values, dtype=np.int64)
            except ValueError:
                raise DatasetError(f"{path}: row {rowno}: non-integer pixel value") from None
            if px.min() < 0 or px.max() > 255:
                raise DatasetError(f"{path}: row {rowno}: pixel values must lie in [0, 255]")
            samples.append(Sample(label, _fer_loader(px.astype(np.uint8)), native_side=FER2013_SIDE,
                                  source=f"row{rowno}"))
    return LabeledDataset(samples, FER2013_CLASSES, split, cache_size)


# class-per-directory pixmaps -----------------------------------------------------

_SUBJECT = re.compile(r"^subject(\d+)_")
PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}


def _pnm_loader(path: Path):
    return lambda: read_pnm(path)


def _pnm_shape(path: Path) -> tuple[int, int]:
    img = read_pnm(path)
    return img.height, img.width


def load_image_directory(root, split_tag: str = "train", cache_size: int = 4096) -> LabeledDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} contains no class subdirectories")
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in PNM_SUFFIXES)
        if not files:
            raise DatasetError(f"class directory {cdir} contains no pixmaps")
        for f in files:
            h, w = _pnm_shape(f)
            m = _SUBJECT.match(f.name)
            samples.append(Sample(label, _pnm_loader(f), subject=int(m.group(1)) if m else None,
                                  native_side=min(h, w), source=str(f.relative_to(root))))
    return LabeledDataset(samples, [p.name for p in class_dirs], split_tag, cache_size)


# synthetic radial glyphs --------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 6
    native_side: int = 64
    samples_per_class: int = 50
    noise_sigma: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def glyph_lobes(label: int) -> int:
    return label + 2


def render_glyph(label: int, side: int, rotation: float) -> np.ndarray:
    """Filled radial glyph r(theta) = 0.3 + 0.12 cos(lobes * (theta - rotation)), 1-px soft edge."""
    c = (np.arange(side) + 0.5) / side - 0.5
    x, y = np.meshgrid(c, c)
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    radius = 0.3 + 0.12 * np.cos(glyph_lobes(label) * (theta - rotation))
    return np.clip((radius - rho) * side + 0.5, 0.0, 1.0)


def synth_sample(spec: SynthSpec, label: int, index: int) -> ImageBuffer:
    rng = Xoshiro256pp.derive(spec.seed, "synth", label, index)
    rotation = rng.uniform(0.0, 2.0 * math.pi)
    px = render_glyph(label, spec.native_side, rotation)
    if spec.noise_sigma > 0:
        px = px + spec.noise_sigma * rng.normal_array(px.size).reshape(px.shape)
    px = np.clip(px, 0.0, 1.0).astype(np.float32)
    return ImageBuffer(px[:, :, None], native_shortest_side=spec.native_side)


def generate_synthetic(spec: SynthSpec, split_tag: str = "train") -> LabeledDataset:
    """Class-interleaved order: sample i has label i % num_classes."""
    samples = []
    for i in range(spec.num_classes * spec.samples_per_class):
        label, j = i % spec.num_classes, i // spec.num_classes
        img = synth_sample(spec, label, j)
        samples.append(Sample(label, (lambda im=img: im), native_side=spec.native_side,
                              source=f"c{label:02d}_{j:05d}"))
    names = [f"lobes{glyph_lobes(c)}" for c in range(spec.num_classes)]
    return LabeledDataset(samples, names, split_tag)


# class weights -----------------------------------------------------------------

@dataclass
class ClassWeights:
    weights: dict[int, float]
    per_class_count: dict[int, int]
    total_count: int
    class_names: list[str] = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.array([self.weights[c] for c in sorted(self.weights)], dtype=np.float64)

    def rounded(self, digits: int = 3) -> dict[int, float]:
        return {c: round(w, digits) for c, w in self.weights.items()}

    def to_csv(self) -> str:
        lines = ["class,count,weight"]
        for c in sorted(self.weights):
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            lines.append(f"{name},{self.per_class_count[c]},{self.weights[c]:.3f}")
        return "\n".join(lines) + "\n"


def class_weights_from_counts(counts: Sequence[int], class_names: Sequence[str] = ()) -> ClassWeights:
    """w_c = 1 - n_c / N. A lone class would get 0, so it is given 1 instead."""
    counts = [int(n) for n in counts]
    empty = [c for c, n in enumerate(counts) if n < 1]
    if empty:
        names = [class_names[c] if c < len(class_names) else str(c) for c in empty]
        raise DatasetError(f"classes without samples: {names}")
    total = sum(counts)
    if len(counts) == 1:
        log.warning("single-class dataset: weight 1 - n/N would be 0, using 1.0")
        weights = {0: 1.0}
    else:
        weights = {c: 1.0 - n / total for c, n in enumerate(counts)}
    return ClassWeights(weights, dict(enumerate(counts)), total, list(class_names))


def compute_class_weights(ds: LabeledDataset) -> ClassWeights:
    return class_weights_from_counts(ds.class_counts(), ds.class_names)


# folds and batches ---------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignments: list[int]

    def test_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f != fold]

    def folds(self) -> list[list[int]]:
        return [self.test_indices(f) for f in range(self.k)]


def kfold_split(ds: LabeledDataset, k: int = 10, seed: int = 0, by_subject: bool | None = None) -> FoldPlan:
    """Subject-disjoint folds when every sample carries a subject id, class-stratified otherwise."""
    n = len(ds)
    if k < 1 or k > n:
        raise DatasetError(f"cannot split {n} samples into {k} folds")
    rng = Xoshiro256pp.derive(seed, "kfold", k)
    if by_subject is None:
        by_subject = ds.has_subjects
    assign = [0] * n
    if by_subject:
        subjects = sorted(set(ds.subjects))
        if k > len(subjects):
            raise DatasetError(f"cannot split {len(subjects)} subjects into {k} folds")
        rng.shuffle(subjects)
        fold_of = {s: i % k for i, s in enumerate(subjects)}
        for i, s in enumerate(ds.subjects):
            assign[i] = fold_of[s]
    else:
        labels = ds.labels
        order = []
        for c in range(ds.num_classes):
            idx = [int(i) for i in np.flatnonzero(labels == c)]
            rng.shuffle(idx)
            order.extend(idx)
        for pos, i in enumerate(order):
            assign[i] = pos % k
    return FoldPlan(k, assign)


def stratified_holdout(ds: LabeledDataset, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Split indices into (keep, holdout) with ~fraction of every class held out."""
    rng = Xoshiro256pp.derive(seed, "holdout")
    keep, hold = [], []
    labels = ds.labels
    for c in range(ds.num_classes):
        idx = [int(i) for i in np.flatnonzero(labels == c)]
        rng.shuffle(idx)
        m = int(round(fraction * len(idx)))
        if len(idx) > 1:
            m = min(max(m, 1), len(idx) - 1)
        else:
            m = 0
        hold.extend(idx[:m])
        keep.extend(idx[m:])
    return sorted(keep), sorted(hold)


def batches(ds, batch_size: int, epoch: int, seed: int) -> list[list[int]]:
    """Seeded per-epoch shuffle of the indices cut into batches; the short tail batch is kept.

    ``ds`` is a dataset or a sample count.
    """
    n = ds if isinstance(ds, int) else len(ds)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = Xoshiro256pp(derive_seed(seed, "batches", epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
