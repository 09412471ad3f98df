"""Experiment configuration: every scalar knob, JSON round-trippable."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .scene import ANNOTATION_MODES, D_MAX, NUM_CLASSES, SceneSpec


@dataclass
class ModelConfig:
    channels: int = 64          # C, query/feature width
    embed_channels: int = 32    # C_e, pixel embedding width
    depth_channels: int = 32    # C_d, depth embedding width
    num_queries: int = 20       # N
    num_latents: int = 32       # M
    decoder_layers: int = 9     # l, cycles the 3 pyramid levels coarse->fine
    ffn_hidden: int = 128
    num_classes: int = NUM_CLASSES


@dataclass
class LossConfig:
    w_cls: float = 2.0
    w_mask: float = 5.0
    w_depth: float = 2.5
    w_sg: float = 0.1
    w_dg: float = 0.1
    si_lambda: float = 0.85     # variance term of the scale-invariant depth loss
    tau: float = 10.0           # depth-distance scale in the depth-to-semantic loss
    alpha: float = 0.3          # triplet margin in the semantic-to-depth loss
    patch_size: int = 5         # K
    empty_weight: float = 0.1   # no-object class weight in the classification loss
    d_max: float = D_MAX


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    seg_pretrain_frac: float = 0.6   # fraction of steps with segmentation losses only
    checkpoint_every: int = 500


@dataclass
class ExperimentConfig:
    seed: int = 0
    num_scenes: int = 1
    # fractions of scenes annotated panoptic-only / depth-only / full
    mode_split: tuple[float, float, float] = (0.0, 0.0, 1.0)
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    enable_sg: bool = True
    enable_dg: bool = True
    enable_backup: bool = True
    enable_enhancement: bool = True

    def validate(self) -> None:
        self.scene.validate()
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be >= 0")
        if abs(sum(self.mode_split) - 1.0) > 1e-9:
            raise ValueError("mode_split must sum to 1")
        if self.loss.patch_size % 2 == 0 or self.loss.patch_size < 3:
            raise ValueError("patch_size must be odd and >= 3")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        scene = SceneSpec(**d.pop("scene", {}))
        model = ModelConfig(**d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        train = TrainConfig(**d.pop("train", {}))
        if "mode_split" in d:
            d["mode_split"] = tuple(d["mode_split"])
        return cls(scene=scene, model=model, loss=loss, train=train, **d)

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def annotation_mode_for(index: int, split: tuple[float, float, float],
                        total: int) -> str:
    """Deterministic round-robin over (panoptic_only, depth_only, full) quotas."""
    quotas = [round(split[0] * total), round(split[1] * total)]
    quotas.append(total - quotas[0] - quotas[1])
    mode_of = []
    counters = [0, 0, 0]
    for i in range(total):
        j = i % 3
        for off in range(3):
            m = (j + off) % 3
            if counters[m] < quotas[m]:
                counters[m] += 1
                mode_of.append(("panoptic_only", "depth_only", "full")[m])
                break
    return mode_of[index]
