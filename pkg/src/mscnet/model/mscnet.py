"""End-to-end change detector: encoders, NCEM, differences, CAIM, SMRM, head."""

from __future__ import annotations

from typing import Dict

import numpy as np

from ..autograd import Tensor, count_flops_ctx, no_grad, resize_bilinear, sigmoid
from ..autograd.nn import Conv2d, Module
from ..config import ModelConfig
from ..errors import DataError, ShapeError
from ..rng import RngContext
from .backbone import BranchTag, build_backbone, encode
from .caim import Caim, diff_features
from .ncem import Ncem
from .smrm import Smrm


class MSCNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = RngContext(seed)
        enc = build_backbone(config, rng.spawn(0))
        self.enc_rgb, self.enc_nir = enc["rgb"], enc["nir"]
        if config.use_ncem:
            self.ncem_rgb = Ncem(rng.spawn(10), config.widths, config.alpha_init)
            self.ncem_nir = Ncem(rng.spawn(11), config.widths, config.alpha_init)
        self.caim = Caim(rng.spawn(20), config)
        if config.use_smrm:
            self.smrm = Smrm(rng.spawn(30), config.widths, config.omega_init)
        self.head = Conv2d(rng.spawn(40), config.widths[0], 1, 1, bias=True)
        self.head.bias.data[:] = config.head_prior
        self.assign_names()

    @property
    def encoders(self) -> Dict[str, Module]:
        return {"rgb": self.enc_rgb, "nir": self.enc_nir}

    def _differences(self, modality: str, x_t1: Tensor, x_t2: Tensor):
        pyr1 = encode(self.encoders, x_t1, BranchTag(modality, "t1"))
        pyr2 = encode(self.encoders, x_t2, BranchTag(modality, "t2"))
        if self.config.use_ncem:
            ncem = self.ncem_rgb if modality == "rgb" else self.ncem_nir
            pyr1, pyr2 = ncem(pyr1), ncem(pyr2)
        return diff_features(pyr1, pyr2)

    def features(self, rgb_t1, rgb_t2, nir_t1, nir_t2, mask_t1=None, mask_t2=None) -> Tensor:
        """Return the refined stride-4 map M1' before the prediction head."""
        cfg = self.config
        d_rgb = self._differences("rgb", rgb_t1, rgb_t2) if cfg.mode != "nir_only" else None
        d_nir = self._differences("nir", nir_t1, nir_t2) if cfg.mode != "rgb_only" else None
        # single-modality inputs feed the same stream to both fusion inputs
        if d_rgb is None:
            d_rgb = d_nir
        if d_nir is None:
            d_nir = d_rgb
        fused = self.caim(d_rgb, d_nir)
        if not cfg.use_smrm:
            return fused[0]
        ref = rgb_t1 if cfg.mode != "nir_only" else nir_t1
        n, _, h, w = ref.shape
        if cfg.use_masks:
            if mask_t1 is None or mask_t2 is None:
                raise DataError("use_masks is set but saliency masks were not provided")
            for mk in (mask_t1, mask_t2):
                if mk.shape != (n, 1, h, w):
                    raise DataError(f"mask shape {mk.shape} does not match image {(n, 1, h, w)}")
        else:
            zeros = Tensor(np.zeros((n, 1, h, w), dtype=ref.dtype))
            mask_t1 = mask_t2 = zeros
        return self.smrm(fused, list(zip(d_rgb, d_nir)), mask_t1, mask_t2)

    def forward(self, rgb_t1, rgb_t2, nir_t1, nir_t2, mask_t1=None, mask_t2=None) -> Tensor:
        ref = rgb_t1 if self.config.mode != "nir_only" else nir_t1
        h, w = ref.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")
        m1 = self.features(rgb_t1, rgb_t2, nir_t1, nir_t2, mask_t1, mask_t2)
        return sigmoid(resize_bilinear(self.head(m1), h, w))

    def forward_batch(self, batch: Dict[str, np.ndarray]) -> Tensor:
        dt = self.head.weight.dtype
        t = {k: Tensor(np.asarray(batch[k], dtype=dt)) for k in
             ("rgb_t1", "rgb_t2", "nir_t1", "nir_t2", "mask_t1", "mask_t2") if k in batch}
        return self.forward(t["rgb_t1"], t["rgb_t2"], t["nir_t1"], t["nir_t2"],
                            t.get("mask_t1"), t.get("mask_t2"))


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.trainable_parameters()))


def count_flops(model: MSCNet, input_size: int, batch: int = 1) -> int:
    """2 x multiply-accumulates of convolutions and matmuls in one forward pass."""
    cfg = model.config
    nir_c = cfg.nir_channels
    z = lambda c: Tensor(np.zeros((batch, c, input_size, input_size), dtype=model.head.weight.dtype))  # noqa: E731
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_flops_ctx() as counter:
            model(z(3), z(3), z(nir_c), z(nir_c), z(1), z(1))
    finally:
        model.train(was_training)
    return counter[0]


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> MSCNet:
    model = MSCNet(config, seed)
    if dtype != np.float32:
        model.to(dtype)
    return model


__all__ = ["MSCNet", "build_model", "count_params", "count_flops"]
