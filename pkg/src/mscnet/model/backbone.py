"""Siamese four-branch encoder.

One encoder per modality; the t1 and t2 images of a modality run through
the same encoder, so their features differ only where the scenes differ.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

from ..autograd import Tensor
from ..autograd.nn import ConvBNReLU, DSConvBNReLU, Module
from ..config import ModelConfig
from ..errors import ConfigError, ShapeError
from ..rng import RngContext

MODALITIES = ("rgb", "nir")
TIMES = ("t1", "t2")


@dataclass(frozen=True)
class BranchTag:
    modality: str
    time: str

    def __post_init__(self):
        if self.modality not in MODALITIES or self.time not in TIMES:
            raise ConfigError(f"invalid branch tag {self.modality}/{self.time}")


FeaturePyramid = List[Tensor]


class Stage(Module):
    def __init__(self, rng: RngContext, cin: int, cout: int):
        self.down = ConvBNReLU(rng, cin, cout, 3, stride=2)
        self.refine = DSConvBNReLU(rng, cout, cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.refine(self.down(x))


class Encoder(Module):
    """Stem at stride 2, then four stages tapped at strides 4, 8, 16, 32."""

    def __init__(self, rng: RngContext, in_channels: int, stem_width: int, widths):
        self.in_channels = in_channels
        self.stem = ConvBNReLU(rng, in_channels, stem_width, 3, stride=2)
        chans = [stem_width, *widths]
        self.stages = [Stage(rng, chans[i], chans[i + 1]) for i in range(4)]

    def forward(self, x: Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects [N,{self.in_channels},H,W], got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(f"spatial size {x.shape[2:]} not divisible by 32")
        h = self.stem(x)
        levels = []
        for stage in self.stages:
            h = stage(h)
            levels.append(h)
        return levels


def build_backbone(config: ModelConfig, rng: RngContext) -> Dict[str, Encoder]:
    return {
        "rgb": Encoder(rng.spawn(1), 3, config.stem_width, config.widths),
        "nir": Encoder(rng.spawn(2), config.nir_channels, config.stem_width, config.widths),
    }


def encode(encoders: Dict[str, Encoder], image: Tensor, tag: BranchTag) -> FeaturePyramid:
    # tag.time deliberately does not select parameters
    return encoders[tag.modality](image)

