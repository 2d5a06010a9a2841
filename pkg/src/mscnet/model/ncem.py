"""Neighborhood context enhancement over a four-level pyramid."""

from __future__ import annotations

from typing import List, Optional

from ..autograd import Tensor, concat, max_pool2d, resize_bilinear
from ..autograd.nn import Conv2d, ConvBNReLU, DSConvBNReLU, Gate, Module
from ..errors import ShapeError
from ..rng import RngContext


class NcemLevel(Module):
    """Enhances level ``index`` (0-based) using its immediate neighbours.

    Branches that would need a missing neighbour are not built at all.
    """

    def __init__(self, rng: RngContext, widths, index: int, alpha_init: float = 0.0):
        c = widths[index]
        self.index = index
        self.has_low = index > 0
        self.has_high = index < len(widths) - 1
        if self.has_low:
            self.low_reduce = ConvBNReLU(rng, widths[index - 1], c, 1)
            self.low_refine = DSConvBNReLU(rng, c, c)
            self.res_reduce = ConvBNReLU(rng, widths[index - 1], c, 1)
            self.alpha = Gate(alpha_init)
        self.main = ConvBNReLU(rng, c, c, 3)
        if self.has_high:
            self.high_reduce = ConvBNReLU(rng, widths[index + 1], c, 1)
            self.high_refine = DSConvBNReLU(rng, c, c)
        n_branches = 1 + self.has_low + self.has_high
        self.fuse = ConvBNReLU(rng, n_branches * c, c, 3)
        # linear projection: no BN, no activation
        self.proj = Conv2d(rng, c, c, 1, bias=True)

    def forward(
        self,
        f_low: Optional[Tensor],
        f_cur: Tensor,
        f_high: Optional[Tensor],
        f_low_enhanced: Optional[Tensor],
    ) -> Tensor:
        h, w = f_cur.shape[2:]
        branches = []
        if self.has_low:
            if f_low is None or f_low_enhanced is None:
                raise ShapeError(f"level {self.index + 1} needs its lower neighbour")
            for t in (f_low, f_low_enhanced):
                if t.shape[2:] != (2 * h, 2 * w):
                    raise ShapeError(f"lower neighbour {t.shape} not at twice {f_cur.shape[2:]}")
            low = self.low_refine(self.low_reduce(max_pool2d(f_low, 2, 2)))
            res = self.res_reduce(max_pool2d(f_low_enhanced, 2, 2))
            a = self.alpha()
            branches.append((1 - a) * low + a * res)
        branches.append(self.main(f_cur))
        if self.has_high:
            if f_high is None:
                raise ShapeError(f"level {self.index + 1} needs its upper neighbour")
            if f_high.shape[2:] != (h // 2, w // 2):
                raise ShapeError(f"upper neighbour {f_high.shape} not at half {f_cur.shape[2:]}")
            high = self.high_refine(self.high_reduce(f_high))
            branches.append(resize_bilinear(high, h, w))
        return self.fuse(concat(branches, axis=1)) + self.proj(f_cur)


class Ncem(Module):
    def __init__(self, rng: RngContext, widths, alpha_init: float = 0.0):
        self.levels = [NcemLevel(rng.spawn(i), widths, i, alpha_init) for i in range(len(widths))]

    def forward(self, pyr: List[Tensor]) -> List[Tensor]:
        if len(pyr) != len(self.levels):
            raise ShapeError(f"expected a {len(self.levels)}-level pyramid, got {len(pyr)}")
        out: List[Tensor] = []
        for i, level in enumerate(self.levels):
            f_low = pyr[i - 1] if i > 0 else None
            f_high = pyr[i + 1] if i + 1 < len(pyr) else None
            enh = out[i - 1] if i > 0 else None
            out.append(level(f_low, pyr[i], f_high, enh))
        return out
