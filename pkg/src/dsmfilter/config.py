"""One YAML document holding every tunable: scene, split, model, training, baseline, inference."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .baseline import BaselineParams
from .dataset import Region, SplitSpec
from .network import ModelSpec
from .synthcity import SceneSpec
from .trainer import TrainConfig

SECTIONS = ("scene", "split", "model", "train", "baseline", "infer")


@dataclass
class InferSpec:
    patch: int = 256
    stride: int = 64
    batch_size: int = 16

    def __post_init__(self):
        if self.patch < 1 or self.stride < 1 or self.batch_size < 1:
            raise ValueError("patch, stride and batch_size must be positive")


def default_split(rows: int, cols: int) -> SplitSpec:
    """Top two thirds for training; the bottom third halved into val | test."""
    top = (2 * rows) // 3
    half = cols // 2
    return SplitSpec(Region(0, 0, top, cols), Region(top, 0, rows - top, half),
                     Region(top, half, rows - top, cols - half))


@dataclass
class Config:
    scene: SceneSpec = field(default_factory=SceneSpec)
    split: SplitSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineParams = field(default_factory=BaselineParams)
    infer: InferSpec = field(default_factory=InferSpec)

    def __post_init__(self):
        if self.split is None:
            self.split = default_split(self.scene.rows, self.scene.cols)

    @property
    def model(self) -> ModelSpec:
        return self.train.model

    def with_seed(self, seed: int) -> Config:
        cfg = copy.deepcopy(self)
        cfg.scene.seed = seed
        cfg.train.seed = seed
        return cfg

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        model = train.pop("model")
        return {
            "scene": self.scene.to_dict(),
            "split": self.split.to_dict(),
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in model.items()},
            "train": train,
            "baseline": self.baseline.to_dict(),
            "infer": asdict(self.infer),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> Config:
        d = dict(d or {})
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        scene = SceneSpec.from_dict(d.get("scene") or {})
        train_d = dict(d.get("train") or {})
        if "model" in train_d:
            raise ValueError("model settings belong in the top-level 'model' section")
        train_d["model"] = ModelSpec.from_dict(d.get("model") or {})
        train = TrainConfig.from_dict(train_d)
        split = SplitSpec.from_dict(d["split"]) if d.get("split") else None
        baseline = BaselineParams(**(d.get("baseline") or {}))
        infer = InferSpec(**(d.get("infer") or {}))
        cfg = cls(scene, split, train, baseline, infer)
        cfg.split.check_extent(scene.rows, scene.cols)
        return cfg


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path) as f:
        return Config.from_dict(yaml.safe_load(f))


def save_config(cfg: Config, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


def benchmark_config(seed: int = 0) -> Config:
    """Desk-scale benchmark: 200 train and 50 val patches of 64x64, width 0.125, 20 epochs."""
    scene = SceneSpec(rows=960, cols=1280, building_count=110, tree_count=330, seed=2024)
    split = SplitSpec(Region(0, 0, 640, 1280), Region(640, 0, 320, 640), Region(640, 640, 320, 640))
    train = TrainConfig(model=ModelSpec(width=0.125), patch_size=64, max_shift=64, epochs=20, seed=seed)
    return Config(scene, split, train, BaselineParams(), InferSpec(patch=64, stride=16))
