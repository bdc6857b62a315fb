"""Experiment configuration: one JSON document that pins down a whole run.

Layout (every section optional; missing keys take the defaults of the
matching dataclass)::

    {
      "skeleton": "h36m17",            # built-in name or path to a skeleton JSON
      "seed": 0,                        # fills the seed of every section not set explicitly
      "val_samples": 1000,              # validation set size
      "val_seed_offset": 1000,          # validation generator seed = data.seed + offset
      "data":      {GeneratorConfig fields},
      "camera":    {"focal", "principal_point", "subject_depth"},
      "posenet":   {PoseNetConfig fields},
      "lossnet":   {LossNetConfig fields},
      "objective": {ObjectiveConfig fields},
      "train":     {TrainConfig fields other than "objective"},
      "gbi":       {GbiConfig fields},
      "output_dir": "runs/example"
    }

The digest hashes the canonical JSON of everything except ``output_dir``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ContractError
from .gbi import GbiConfig
from .lossnet import LossNetConfig
from .objectives import ObjectiveConfig
from .posenet import PoseNetConfig
from .skeleton import SkeletonSpec, ensure_valid, get_skeleton
from .synthdata import CameraModel, GeneratorConfig
from .trainer import TrainConfig

SECTIONS = ("data", "camera", "posenet", "lossnet", "objective", "train", "gbi")


@dataclass(frozen=True)
class ExperimentConfig:
    skeleton: str = "h36m17"
    seed: int = 0
    val_samples: int = 1000
    val_seed_offset: int = 1000
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    camera: CameraModel = field(default_factory=CameraModel)
    posenet: PoseNetConfig = field(default_factory=PoseNetConfig)
    lossnet: LossNetConfig = field(default_factory=LossNetConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gbi: GbiConfig = field(default_factory=GbiConfig)
    output_dir: str = "runs"

    def spec(self) -> SkeletonSpec:
        return ensure_valid(get_skeleton(self.skeleton))

    def train_config(self) -> TrainConfig:
        """The training config with this experiment's objective attached."""
        return replace(self.train, objective=self.objective).check()

    def val_generator(self) -> GeneratorConfig:
        return replace(self.data, n_samples=self.val_samples, seed=self.data.seed + self.val_seed_offset)

    def to_dict(self, include_output: bool = True) -> dict:
        train = self.train.to_dict()
        train.pop("objective", None)
        d = {
            "skeleton": self.skeleton,
            "seed": self.seed,
            "val_samples": self.val_samples,
            "val_seed_offset": self.val_seed_offset,
            "data": self.data.to_dict(),
            "camera": self.camera.to_dict(),
            "posenet": self.posenet.to_dict(),
            "lossnet": self.lossnet.to_dict(),
            "objective": self.objective.to_dict(),
            "train": train,
            "gbi": self.gbi.to_dict(),
        }
        if include_output:
            d["output_dir"] = self.output_dir
        return d

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(include_output=False), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def short_digest(self) -> str:
        return self.digest()[:12]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(SECTIONS) - {"skeleton", "seed", "val_samples", "val_seed_offset", "output_dir"}
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        skeleton = d.get("skeleton", "h36m17")

        def section(name):
            sec = dict(d.get(name) or {})
            if name not in ("camera",):
                sec.setdefault("seed", seed)
            return sec

        data = section("data")
        data.setdefault("skeleton", skeleton)
        if data["skeleton"] != skeleton:
            raise ContractError(f"data.skeleton {data['skeleton']!r} differs from skeleton {skeleton!r}")
        gbi = dict(d.get("gbi") or {})
        objective = dict(d.get("objective") or {})
        try:
            cfg = cls(
                skeleton=skeleton,
                seed=seed,
                val_samples=int(d.get("val_samples", 1000)),
                val_seed_offset=int(d.get("val_seed_offset", 1000)),
                data=GeneratorConfig.from_dict(data),
                camera=CameraModel.from_dict({**CameraModel().to_dict(), **(d.get("camera") or {})}),
                posenet=PoseNetConfig.from_dict(section("posenet")),
                lossnet=LossNetConfig.from_dict(section("lossnet")),
                objective=ObjectiveConfig.from_dict(objective),
                train=TrainConfig.from_dict({**section("train"), "objective": objective}),
                gbi=GbiConfig.from_dict(gbi),
                output_dir=str(d.get("output_dir", "runs")),
            )
        except TypeError as exc:  # unexpected field names inside a section
            raise ContractError(f"invalid config: {exc}") from exc
        cfg.data.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def updated(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"train.epochs": 3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            node = d
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)
