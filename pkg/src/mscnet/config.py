"""Model and training configuration, serialised as JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

from .errors import ConfigError

MODES = ("rgb_nir", "rgb_only", "nir_only")
MODE_ALIASES = {"rgbnir": "rgb_nir", "rgb": "rgb_only", "nir": "nir_only"}


@dataclass
class TrainConfig:
    iters: int = 40000
    batch_size: int = 16
    base_lr: float = 5e-4
    warmup: int = 200
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    val_interval: int = 200
    hflip: bool = False


@dataclass
class ModelConfig:
    widths: Tuple[int, int, int, int] = (16, 24, 48, 64)
    stem_width: int = 8
    image_size: int = 256
    awp_grid: int = 8
    nir_channels: int = 1
    mode: str = "rgb_nir"
    use_ncem: bool = True
    use_caim: bool = True
    use_smrm: bool = True
    use_masks: bool = True
    use_bdca: bool = True
    use_variance_weight: bool = True
    use_ccaf: bool = True
    alpha_init: float = 0.0
    awp_lambda_init: float = 0.0
    omega_init: float = 0.0
    head_prior: float = 0.0
    threshold: float = 0.5
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.widths = tuple(int(c) for c in self.widths)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != 4 or any(c <= 0 for c in self.widths):
            raise ConfigError(f"widths must be four positive integers, got {self.widths}")
        if self.stem_width <= 0:
            raise ConfigError("stem_width must be positive")
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.awp_grid < 1:
            raise ConfigError("awp_grid must be >= 1")
        if self.nir_channels not in (1, 3):
            raise ConfigError("nir_channels must be 1 or 3")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")

    def level_sizes(self, image_size: int | None = None) -> Tuple[int, ...]:
        s = self.image_size if image_size is None else image_size
        return tuple(s // (4 << i) for i in range(4))

    def grids(self) -> Tuple[int, ...]:
        return tuple(min(self.awp_grid, s) for s in self.level_sizes())

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "train" in d:
            tk = {f.name for f in dataclasses.fields(TrainConfig)}
            bad = set(d["train"]) - tk
            if bad:
                raise ConfigError(f"unknown train config keys: {sorted(bad)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
