"""Procedural image-classification task whose label lives in patch structure.

Every class owns a fixed template that assigns one of a few textures to each
cell of the patch grid. A sample renders its class template with a random
phase per patch, swaps a fraction of cells for random textures and adds
Gaussian pixel noise. Telling classes apart therefore needs per-patch texture
recognition plus aggregation over positions.

Besides the student train/eval splits, an optional larger split stands in for
the data a teacher was pretrained on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError

NUM_TEXTURES = 4


@dataclass
class DatasetSpec:
    num_classes: int = 8
    image_size: Tuple[int, int] = (16, 16)
    channels: int = 1
    patch_size: int = 4
    train_samples: int = 256
    eval_samples: int = 512
    teacher_samples: int = 16384
    noise: float = 0.4
    corruption: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.num_classes < 2:
            raise ConfigError("dataset needs at least 2 classes")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError("image size must be divisible by patch size")
        if self.train_samples < self.num_classes or self.eval_samples < 1 or self.teacher_samples < 0:
            raise ConfigError("too few samples for the number of classes")
        if not 0.0 <= self.corruption < 1.0 or self.noise < 0:
            raise ConfigError("corruption must lie in [0, 1) and noise be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray
    templates: np.ndarray
    teacher_images: Optional[np.ndarray] = None
    teacher_labels: Optional[np.ndarray] = None

    def teacher_split(self) -> "Dataset":
        """The split teachers are pretrained on (the student split if none was generated)."""
        if self.teacher_images is None:
            return self
        return Dataset(self.teacher_images, self.teacher_labels, self.eval_images, self.eval_labels,
                       self.templates)


def _textures(p: int) -> np.ndarray:
    """(NUM_TEXTURES, 2, p, p): each texture at two phases."""
    r, c = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    horiz = np.where(r % 2 == 0, 1.0, -1.0)
    vert = np.where(c % 2 == 0, 1.0, -1.0)
    checker = horiz * vert
    ramp = (r + c) / (2 * (p - 1)) * 2.0 - 1.0 if p > 1 else np.ones((1, 1))
    base = np.stack([horiz, vert, checker, ramp])
    return np.stack([base, -base], axis=1)


def _templates(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    cells = (spec.image_size[0] // spec.patch_size) * (spec.image_size[1] // spec.patch_size)
    seen, out = set(), []
    while len(out) < spec.num_classes:
        t = rng.integers(0, NUM_TEXTURES, size=cells)
        key = t.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(t)
    return np.stack(out)


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def _render(labels: np.ndarray, templates: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    p, c = spec.patch_size, spec.channels
    gh, gw = spec.image_size[0] // p, spec.image_size[1] // p
    tex = _textures(p)
    n, cells = len(labels), gh * gw
    kinds = templates[labels].copy()
    swap = rng.random((n, cells)) < spec.corruption
    kinds[swap] = rng.integers(0, NUM_TEXTURES, size=int(swap.sum()))
    phase = rng.integers(0, 2, size=(n, cells))
    gain = rng.uniform(0.7, 1.3, size=(n, cells, 1, 1, c))
    patches = tex[kinds, phase][..., None] * gain
    images = patches.reshape(n, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * p, gw * p, c)
    return images + spec.noise * rng.standard_normal(images.shape)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic, class-balanced train/eval splits for ``spec``."""
    root = np.random.default_rng(spec.seed)
    template_rng, train_rng, eval_rng, teacher_rng = root.spawn(4)
    templates = _templates(spec, template_rng)
    train_labels = _balanced_labels(spec.train_samples, spec.num_classes, train_rng)
    eval_labels = _balanced_labels(spec.eval_samples, spec.num_classes, eval_rng)
    teacher_images = teacher_labels = None
    if spec.teacher_samples:
        teacher_labels = _balanced_labels(spec.teacher_samples, spec.num_classes, teacher_rng)
        teacher_images = _render(teacher_labels, templates, spec, teacher_rng)
    return Dataset(
        train_images=_render(train_labels, templates, spec, train_rng),
        train_labels=train_labels,
        eval_images=_render(eval_labels, templates, spec, eval_rng),
        eval_labels=eval_labels,
        templates=templates,
        teacher_images=teacher_images,
        teacher_labels=teacher_labels,
    )
