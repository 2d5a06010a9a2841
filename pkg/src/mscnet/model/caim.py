"""Cross-modal alignment and interaction between RGB and NIR difference maps."""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from ..autograd import (
    Tensor, adaptive_pool2d, concat, global_avg, matmul, mean, relu, reshape,
    resize_bilinear, scale, sigmoid, softmax, tabs, transpose,
)
from ..autograd.nn import Conv2d, Gate, Linear, Module, Parameter
from ..errors import NumericError, ShapeError
from ..rng import RngContext


def diff_features(pyr_t1: List[Tensor], pyr_t2: List[Tensor]) -> List[Tensor]:
    if len(pyr_t1) != len(pyr_t2):
        raise ShapeError("pyramids have different depths")
    out = []
    for a, b in zip(pyr_t1, pyr_t2):
        if a.shape != b.shape:
            raise ShapeError(f"pyramid level shapes differ: {a.shape} vs {b.shape}")
        out.append(tabs(a - b))
    return out


def variance_weight(attn: Tensor, eps: float = 1e-6) -> Tensor:
    """Re-weight each attention row by how far its entries sit from the row mean."""
    if not np.all(np.isfinite(attn.data)):
        raise NumericError("variance_weight received non-finite attention")
    mu = mean(attn, axis=-1, keepdims=True)
    dev = attn - mu
    dev2 = dev * dev
    var = mean(dev2, axis=-1, keepdims=True)
    mod = sigmoid(dev2 / (scale(var, 2.0) + eps) + 0.5)
    return softmax(attn * mod, axis=-1)


def awp_tokenize(x: Tensor, grid: int, lam: Tensor, pos: Tensor) -> Tensor:
    """Blend adaptive avg/max pooling onto a grid, flatten to [N, L, C], add ``pos``."""
    n, c = x.shape[:2]
    pooled = lam * adaptive_pool2d("avg", x, grid) + (1 - lam) * adaptive_pool2d("max", x, grid)
    tokens = transpose(reshape(pooled, (n, c, grid * grid)), (0, 2, 1))
    if pos.shape != (grid * grid, c):
        raise ShapeError(f"positional encoding {pos.shape} does not match tokens {(grid * grid, c)}")
    return tokens + pos


class CcafAlign(Module):
    def __init__(self, rng: RngContext, c: int):
        self.conv = Conv2d(rng, 2 * c, c, 1, bias=True)

    def forward(self, d_rgb: Tensor, d_nir: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if d_rgb.shape != d_nir.shape:
            raise ShapeError(f"difference maps differ in shape: {d_rgb.shape} vs {d_nir.shape}")
        a1 = sigmoid(global_avg(relu(self.conv(concat([d_rgb, d_nir], axis=1)))))
        return d_rgb + d_nir * a1, d_nir + d_rgb * a1, a1


class CrossAttention(Module):
    """One direction: queries from the other modality, keys/values from this one."""

    def __init__(self, rng: RngContext, c: int, expansion: int = 2):
        self.wq = Linear(rng, c, c, bias=False, gain=1.0)
        self.wk = Linear(rng, c, c, bias=False, gain=1.0)
        self.wv = Linear(rng, c, c, bias=False, gain=1.0)
        self.ffn1 = Linear(rng, c, expansion * c)
        self.ffn2 = Linear(rng, expansion * c, c, gain=1.0)

    def attention(self, t_query: Tensor, t_self: Tensor, use_variance_weight: bool = True):
        c = t_self.shape[-1]
        q = self.wq(t_query)
        k = self.wk(t_self)
        attn = softmax(scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(c)), axis=-1)
        refined = variance_weight(attn) if use_variance_weight else attn
        return attn, refined

    def forward(self, t_query: Tensor, t_self: Tensor, use_variance_weight: bool = True) -> Tensor:
        if t_query.shape != t_self.shape:
            raise ShapeError(f"token sequences differ: {t_query.shape} vs {t_self.shape}")
        _, refined = self.attention(t_query, t_self, use_variance_weight)
        ctx = matmul(refined, self.wv(t_self))
        return self.ffn2(relu(self.ffn1(ctx + t_self)))


class CaimLevel(Module):
    def __init__(self, rng: RngContext, c: int, grid: int, config):
        self.grid = grid
        self.use_caim = config.use_caim
        self.use_ccaf = config.use_caim and config.use_ccaf
        self.use_bdca = config.use_caim and config.use_bdca
        self.use_variance_weight = config.use_variance_weight
        if self.use_ccaf:
            self.ccaf = CcafAlign(rng, c)
        if self.use_bdca:
            self.awp = Gate(config.awp_lambda_init)
            self.pos_rgb = Parameter(rng.normal(0.0, 0.02, (grid * grid, c), dtype=np.float32), role="embedding")
            self.pos_nir = Parameter(rng.normal(0.0, 0.02, (grid * grid, c), dtype=np.float32), role="embedding")
            self.attn_rgb = CrossAttention(rng, c)
            self.attn_nir = CrossAttention(rng, c)
        self.fuse = Conv2d(rng, 2 * c, c, 1, bias=True)

    def bdca(self, t_rgb: Tensor, t_nir: Tensor) -> Tuple[Tensor, Tensor]:
        z_rgb = self.attn_rgb(t_nir, t_rgb, self.use_variance_weight)
        z_nir = self.attn_nir(t_rgb, t_nir, self.use_variance_weight)
        return z_rgb, z_nir

    def tokens(self, d_rgb: Tensor, d_nir: Tensor) -> Tuple[Tensor, Tensor]:
        lam = self.awp()
        return (awp_tokenize(d_rgb, self.grid, lam, self.pos_rgb),
                awp_tokenize(d_nir, self.grid, lam, self.pos_nir))

    def forward(self, d_rgb: Tensor, d_nir: Tensor) -> Tensor:
        if d_rgb.shape != d_nir.shape:
            raise ShapeError(f"difference maps differ in shape: {d_rgb.shape} vs {d_nir.shape}")
        if not self.use_caim:
            return self.fuse(concat([d_rgb, d_nir], axis=1))
        e_rgb, e_nir = (self.ccaf(d_rgb, d_nir)[:2] if self.use_ccaf else (d_rgb, d_nir))
        if not self.use_bdca:
            return self.fuse(concat([e_rgb, e_nir], axis=1))
        n, c, h, w = d_rgb.shape
        if min(h, w) < self.grid:
            raise ShapeError(f"grid {self.grid} larger than level {h}x{w}")
        t_rgb, t_nir = self.tokens(e_rgb, e_nir)
        z_rgb, z_nir = self.bdca(t_rgb, t_nir)
        g = self.grid

        def to_map(z):
            return resize_bilinear(reshape(transpose(z, (0, 2, 1)), (n, c, g, g)), h, w)

        return self.fuse(concat([to_map(z_rgb) + d_rgb, to_map(z_nir) + d_nir], axis=1))


class Caim(Module):
    def __init__(self, rng: RngContext, config):
        grids = config.grids()
        self.levels = [CaimLevel(rng.spawn(i), c, g, config) for i, (c, g) in enumerate(zip(config.widths, grids))]

    def forward(self, d_rgb: List[Tensor], d_nir: List[Tensor]) -> List[Tensor]:
        return [lvl(a, b) for lvl, a, b in zip(self.levels, d_rgb, d_nir)]


__all__ = ["diff_features", "variance_weight", "awp_tokenize", "CcafAlign", "CrossAttention", "CaimLevel", "Caim"]
