"""Process-wide numeric settings and the pipeline configuration file."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

_PRECISIONS = {"f32": torch.float32, "f64": torch.float64}
_state = {"precision": "f32", "deterministic": False}


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _state["precision"] = name
    torch.set_default_dtype(_PRECISIONS[name])


def get_dtype() -> torch.dtype:
    return _PRECISIONS[_state["precision"]]


def set_deterministic(flag: bool = True) -> None:
    _state["deterministic"] = bool(flag)
    torch.use_deterministic_algorithms(bool(flag))
    if flag:
        torch.set_num_threads(1)


def is_deterministic() -> bool:
    return _state["deterministic"]


def apply_thread_limit() -> None:
    threads = os.environ.get("VF_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


@dataclass
class LevelConfig:
    level: int
    voxel_size: float
    channels: list[int]
    window: int = 10
    heads: int = 4

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        for c in self.channels:
            if c % self.heads:
                raise ValueError(f"channel width {c} not divisible by {self.heads} heads")

    @property
    def depth(self) -> int:
        return len(self.channels) - 1


def default_levels(
    base=(32, 48, 64), depths=(2, 3, 4), growth: int = 2, window: int = 10, heads: int = 4, fine_voxel: float = 0.04
) -> list[LevelConfig]:
    """Coarse, medium and fine level configs, ordered coarse first."""
    levels = []
    for level, b, d in zip((2, 1, 0), base, depths):
        channels = [b * growth**k for k in range(d + 1)]
        levels.append(LevelConfig(level, fine_voxel * 2**level, channels, window, heads))
    return levels


@dataclass
class PipelineConfig:
    levels: list[LevelConfig] = field(default_factory=default_levels)
    feature_channels: int = 8
    occupancy_threshold: float = 0.5
    global_cap: int = 4096
    tsdf_eps: float = 1e-4
    tsdf_loss_mode: str = "log"
    loss_weights: dict = field(default_factory=lambda: {"tsdf": 1.0, "occupancy": 1.0, "weights": 1.0})
    use_extractor: bool = False
    teacher_forcing: bool = True
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.levels = [lv if isinstance(lv, LevelConfig) else LevelConfig(**lv) for lv in self.levels]
        sizes = [lv.voxel_size for lv in self.levels]
        if [lv.level for lv in self.levels] != [2, 1, 0]:
            raise ValueError("levels must be ordered coarse (2), medium (1), fine (0)")
        for coarse, fine in zip(sizes, sizes[1:]):
            if abs(coarse - 2 * fine) > 1e-9:
                raise ValueError("voxel sizes must double per level")

    def level(self, level: int) -> LevelConfig:
        return self.levels[2 - level]

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls(**data)


def tiny_config(**overrides) -> PipelineConfig:
    """Small widths sized for single-scene overfitting on one CPU core.

    Uses the ``log1p`` TSDF loss: the log-magnitude loss grows without bound
    as a prediction nears zero, which stops voxels from changing sign.
    """
    cfg = dict(
        levels=default_levels(base=(8, 8, 8), depths=(1, 1, 2), growth=1, window=3, heads=2),
        tsdf_loss_mode="log1p",
        lr=1e-3,
    )
    cfg.update(overrides)
    return PipelineConfig(**cfg)
