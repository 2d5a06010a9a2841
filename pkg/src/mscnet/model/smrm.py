"""Saliency-aware top-down refinement of the fused pyramid."""

from __future__ import annotations

from typing import List, Tuple

from ..autograd import Tensor, concat, global_avg, relu, reshape, resize_bilinear, sigmoid
from ..autograd.nn import Conv2d, ConvBNReLU, Gate, Linear, Module
from ..errors import DataError, ShapeError
from ..rng import RngContext


def fmu_hidden(c: int) -> int:
    return max(c // 4, 4)


class Fmu(Module):
    """Channel modulation weights in (0, 1) from a globally pooled conv response."""

    def __init__(self, rng: RngContext, c: int):
        self.conv = Conv2d(rng, c, c, 3, bias=True)
        self.fc1 = Linear(rng, c, fmu_hidden(c))
        self.fc2 = Linear(rng, fmu_hidden(c), c, gain=1.0)

    def forward(self, m: Tensor) -> Tensor:
        n, c = m.shape[:2]
        pooled = reshape(global_avg(self.conv(m)), (n, c))
        weights = sigmoid(self.fc2(relu(self.fc1(pooled))))
        return reshape(weights, (n, c, 1, 1))


class Mrb(Module):
    """Refines level i from its fused map, its difference pair and level i+1."""

    def __init__(self, rng: RngContext, c: int, c_above: int, omega_init: float = 0.0):
        self.diff_conv = Conv2d(rng, c, c, 3, bias=True)
        self.cross_conv = Conv2d(rng, c_above, c, 3, bias=True)
        self.fmu = Fmu(rng, c)
        self.omega = Gate(omega_init)
        self.out = ConvBNReLU(rng, c, c, 3)

    def forward(self, m: Tensor, pair: Tuple[Tensor, Tensor], m_above: Tensor) -> Tensor:
        h, w = m.shape[2:]
        d_rgb, d_nir = pair
        if d_rgb.shape != m.shape or d_nir.shape != m.shape:
            raise ShapeError(f"difference pair {d_rgb.shape}/{d_nir.shape} does not match {m.shape}")
        if m_above.shape[2:] != (h // 2, w // 2):
            raise ShapeError(f"upper level {m_above.shape} is not at half of {m.shape[2:]}")
        d1 = self.diff_conv(d_rgb + d_nir)
        up = resize_bilinear(self.cross_conv(m_above), h, w)
        fused = m * self.fmu(m)
        om = self.omega()
        return self.out(om * d1 + (1 - om) * up + fused)


class Smrm(Module):
    def __init__(self, rng: RngContext, widths, omega_init: float = 0.0):
        c4 = widths[-1]
        self.mask_fuse = Conv2d(rng.spawn(9), c4 + 2, c4, 1, bias=True)
        self.blocks = [Mrb(rng.spawn(i), widths[i], widths[i + 1], omega_init) for i in range(len(widths) - 1)]

    def inject_masks(self, m4: Tensor, mask_t1: Tensor, mask_t2: Tensor) -> Tensor:
        h, w = m4.shape[2:]
        n = m4.shape[0]
        for mk in (mask_t1, mask_t2):
            if mk.ndim != 4 or mk.shape[0] != n or mk.shape[1] != 1:
                raise DataError(f"mask must be [N,1,H,W] with N={n}, got {mk.shape}")
        if mask_t1.shape != mask_t2.shape:
            raise DataError(f"masks differ in size: {mask_t1.shape} vs {mask_t2.shape}")
        r1 = resize_bilinear(mask_t1, h, w)
        r2 = resize_bilinear(mask_t2, h, w)
        return self.mask_fuse(concat([m4, r1, r2], axis=1))

    def forward(self, fused: List[Tensor], pairs: List[Tuple[Tensor, Tensor]],
                mask_t1: Tensor, mask_t2: Tensor) -> Tensor:
        current = self.inject_masks(fused[-1], mask_t1, mask_t2)
        for i in range(len(self.blocks) - 1, -1, -1):
            current = self.blocks[i](fused[i], pairs[i], current)
        return current
