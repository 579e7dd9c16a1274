"""JSON experiment configuration with strict key checking.

Schema (every section optional; missing keys take the defaults shown by
``default_config().to_dict()``)::

    {
      "run_id": str,
      "output_dir": str,
      "seeds": [int, ...],            # student init / data order seeds, one arm set each
      "teacher_checkpoint": str|null, # load instead of training the teacher
      "dataset": {DatasetSpec fields},
      "teacher": {VitConfig fields},
      "student": {VitConfig fields},
      "teacher_training": {DistillConfig fields},
      "distill": {DistillConfig fields}
    }

Unknown keys at any level raise ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .data import DatasetSpec
from .errors import ConfigError
from .objective import DistillConfig
from .vit import VitConfig


def default_teacher() -> VitConfig:
    return VitConfig(embed_dim=64, num_heads=4, num_layers=6, seed=100)


def default_student() -> VitConfig:
    return VitConfig(embed_dim=32, num_heads=2, num_layers=3, seed=0)


def default_teacher_training() -> DistillConfig:
    return DistillConfig(steps=2000, lr=1e-3, warmup_steps=100, eval_every=500, log_every=50, seed=100)


def default_distill() -> DistillConfig:
    return DistillConfig(layer_scheme="shallow_deep", layer_count=2, steps=1000, lr=1e-3, warmup_steps=50,
                         eval_every=250, log_every=25, tau=1.0)


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    seeds: List[int] = field(default_factory=lambda: [0])
    teacher_checkpoint: Optional[str] = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: VitConfig = field(default_factory=default_teacher)
    student: VitConfig = field(default_factory=default_student)
    teacher_training: DistillConfig = field(default_factory=default_teacher_training)
    distill: DistillConfig = field(default_factory=default_distill)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.run_id or "/" in self.run_id or self.run_id in (".", ".."):
            raise ConfigError(f"run_id must be a plain directory name, got {self.run_id!r}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        for part in ("teacher", "student"):
            cfg = getattr(self, part)
            if cfg.num_classes != self.dataset.num_classes:
                raise ConfigError(f"{part}.num_classes differs from dataset.num_classes")
            if (cfg.image_size != self.dataset.image_size or cfg.channels != self.dataset.channels):
                raise ConfigError(f"{part} image shape differs from the dataset's")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "teacher_checkpoint": self.teacher_checkpoint,
            "dataset": self.dataset.to_dict(),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "teacher_training": self.teacher_training.to_dict(),
            "distill": self.distill.to_dict(),
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy whose single seed arm uses ``seed``."""
        return from_dict({**self.to_dict(), "seeds": [int(seed)]})


SECTIONS = {
    "dataset": DatasetSpec,
    "teacher": VitConfig,
    "student": VitConfig,
    "teacher_training": DistillConfig,
    "distill": DistillConfig,
}
TOP_LEVEL = {"run_id", "output_dir", "seeds", "teacher_checkpoint", *SECTIONS}


def _section(name: str, cls, values, base: dict) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**{**base, **values})
    except TypeError as exc:
        raise ConfigError(f"bad value in {name!r}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    defaults = default_config()
    kwargs = {k: raw[k] for k in ("run_id", "output_dir", "teacher_checkpoint") if k in raw}
    if "seeds" in raw:
        if not isinstance(raw["seeds"], list):
            raise ConfigError("seeds must be a list")
        kwargs["seeds"] = [int(s) for s in raw["seeds"]]
    for name, cls in SECTIONS.items():
        kwargs[name] = _section(name, cls, raw.get(name, {}), getattr(defaults, name).to_dict())
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def default_config() -> ExperimentConfig:
    return ExperimentConfig()
