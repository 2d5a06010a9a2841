"""Float64 finite-difference checks over every differentiable piece of the model."""

from __future__ import annotations

import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .autograd.nn import Module
from .config import ModelConfig
from .model import build_model
from .model.caim import CaimLevel, variance_weight
from .model.ncem import Ncem
from .model.smrm import Fmu, Mrb, Smrm
from .rng import RngContext
from .train import loss as train_loss

TOLERANCE = 1e-3
EPS = 1e-6


class _Probe:
    """Random linear read-out turning any tensor into a well-scaled scalar."""

    def __init__(self, rng: RngContext):
        self.rng = rng
        self.cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def __call__(self, out: Tensor) -> Tensor:
        w = self.cache.get(out.shape)
        if w is None:
            w = self.cache[out.shape] = self.rng.normal(0.0, 1.0, out.shape)
        return ag.tsum(out * w)


def _t(rng: RngContext, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape, dtype=np.float64))


def _check(f: Callable, xs: Sequence[Tensor], rng: RngContext, samples: int = 8) -> float:
    gen = np.random.default_rng(rng.integers(0, 2**31))
    # floor tied to the difference quotient's resolution; see grad_check
    return grad_check(f, list(xs), eps=EPS, samples=samples, rng=gen, floor=None)


def _with_params(module: Module, run: Callable[[], Tensor], inputs: Sequence[Tensor], rng: RngContext,
                 samples: int = 4) -> float:
    """Check gradients w.r.t. the inputs and every trainable parameter."""
    params = module.trainable_parameters()
    xs = list(inputs) + params
    return _check(lambda *_: run(), xs, rng, samples)


def check_ops(rng: RngContext) -> Dict[str, float]:
    probe = _Probe(rng.spawn(0))
    r = rng.spawn(1)
    out: Dict[str, float] = {}
    a, b = _t(r, 3, 4), _t(r, 3, 4)
    bcol = _t(r, 3, 1)
    pos = _t(r, 3, 4, low=0.5, high=2.0)
    out["add"] = _check(lambda x, y: probe(x + y), [a, bcol], r)
    out["sub"] = _check(lambda x, y: probe(x - y), [a, b], r)
    out["mul"] = _check(lambda x, y: probe(x * y), [a, bcol], r)
    out["div"] = _check(lambda x, y: probe(x / y), [a, pos], r)
    out["scale"] = _check(lambda x: probe(ag.scale(x, -1.7)), [a], r)
    out["neg"] = _check(lambda x: probe(-x), [a], r)
    # keep |x| away from the kink so the difference quotient is valid
    away = Tensor(np.sign(a.data) * (np.abs(a.data) + 0.1))
    out["abs"] = _check(lambda x: probe(ag.tabs(x)), [away], r)
    out["relu"] = _check(lambda x: probe(ag.relu(x)), [away], r)
    out["sigmoid"] = _check(lambda x: probe(ag.sigmoid(x)), [a], r)
    out["exp"] = _check(lambda x: probe(ag.texp(x)), [a], r)
    out["log"] = _check(lambda x: probe(ag.tlog(x)), [pos], r)
    out["clip"] = _check(lambda x: probe(ag.clip(x, -0.5, 0.5)), [Tensor(np.array([[-0.8, -0.2, 0.3, 0.9]]))], r)
    out["sum"] = _check(lambda x: probe(ag.tsum(x, axis=1, keepdims=True)), [a], r)
    out["mean"] = _check(lambda x: probe(ag.mean(x, axis=0)), [a], r)
    out["reshape"] = _check(lambda x: probe(ag.reshape(x, (2, 6))), [a], r)
    out["transpose"] = _check(lambda x: probe(ag.transpose(x, (1, 0))), [a], r)
    out["concat"] = _check(lambda x, y: probe(ag.concat([x, y], axis=1)), [a, b], r)
    m1, m2 = _t(r, 2, 3, 4), _t(r, 2, 4, 5)
    out["matmul"] = _check(lambda x, y: probe(ag.matmul(x, y)), [m1, m2], r)
    w = _t(r, 5, 4)
    bias = _t(r, 5)
    out["linear"] = _check(lambda x, ww, bb: probe(ag.linear(x, ww, bb)), [a, w, bias], r)

    x = _t(r, 2, 4, 6, 6)
    for name, (cout, cin_g, k, stride, pad, groups) in {
        "conv3x3": (3, 4, 3, 1, 1, 1),
        "conv3x3_s2": (3, 4, 3, 2, 1, 1),
        "conv1x1": (5, 4, 1, 1, 0, 1),
        "conv_depthwise": (4, 1, 3, 1, 1, 4),
        "conv_grouped": (6, 2, 3, 1, 1, 2),
    }.items():
        cw = _t(r, cout, cin_g, k, k)
        cb = _t(r, cout)
        out[name] = _check(
            lambda xx, ww, bb, s=stride, p=pad, g=groups: probe(ag.conv2d(xx, ww, bb, s, p, g)),
            [x, cw, cb], r)
    # distinct values so that max-pooling has no ties
    distinct = Tensor(r.permutation(2 * 4 * 6 * 6).reshape(2, 4, 6, 6).astype(np.float64) / 50.0)
    out["max_pool"] = _check(lambda xx: probe(ag.max_pool2d(xx, 2, 2)), [distinct], r)
    out["avg_pool"] = _check(lambda xx: probe(ag.avg_pool2d(xx, 2, 2)), [x], r)
    out["global_avg"] = _check(lambda xx: probe(ag.global_avg(xx)), [x], r)
    out["adaptive_avg"] = _check(lambda xx: probe(ag.adaptive_pool2d("avg", xx, 4)), [x], r)
    out["adaptive_max"] = _check(lambda xx: probe(ag.adaptive_pool2d("max", xx, 4)), [distinct], r)
    out["resize_up"] = _check(lambda xx: probe(ag.resize_bilinear(xx, 9, 12)), [x], r)
    out["resize_down"] = _check(lambda xx: probe(ag.resize_bilinear(xx, 3, 4)), [x], r)
    out["softmax"] = _check(lambda xx: probe(ag.softmax(xx, axis=-1)), [a], r)
    gamma, beta = _t(r, 4, low=0.5, high=1.5), _t(r, 4)

    def bn(xx, g, bt):
        rm, rv = Tensor(np.zeros(4)), Tensor(np.ones(4))
        return probe(ag.batch_norm(xx, g, bt, rm, rv, training=True))

    out["batch_norm"] = _check(bn, [x, gamma, beta], r)
    label = (r.random((2, 1, 8, 8)) < 0.3).astype(np.float64)
    prob = _t(r, 2, 1, 8, 8, low=0.05, high=0.95)
    out["bce_dice_loss"] = _check(lambda p: train_loss(p, label), [prob], r)
    return out


def _pyramid(rng: RngContext, n: int, widths, size: int) -> List[Tensor]:
    return [_t(rng, n, c, size >> i, size >> i) for i, c in enumerate(widths)]


def _cast(module: Module) -> Module:
    module.to(np.float64)
    module.train()
    return module


def check_ncem(rng: RngContext) -> Dict[str, float]:
    widths = (4, 6, 8, 8)
    probe = _Probe(rng.spawn(0))
    r = rng.spawn(1)
    ncem = _cast(Ncem(r.spawn(2), widths, alpha_init=0.3))
    ncem.assign_names()
    pyr = _pyramid(r, 2, widths, 16)

    def run():
        return sum((probe(o) for o in ncem(pyr)), Tensor(np.zeros(())))

    return {"ncem": _with_params(ncem, run, pyr, r, samples=3)}


def check_caim(rng: RngContext) -> Dict[str, float]:
    probe = _Probe(rng.spawn(0))
    r = rng.spawn(1)
    out = {}
    attn = ag.softmax(_t(r, 2, 5, 5, low=-2, high=2), axis=-1)
    out["variance_weight"] = _check(lambda a: probe(variance_weight(a)), [Tensor(attn.data)], r, samples=20)
    cfg = ModelConfig(awp_lambda_init=0.4)
    level = _cast(CaimLevel(r.spawn(2), 6, 4, cfg))
    level.assign_names()
    # well-separated values keep adaptive max pooling away from ties
    d_rgb = Tensor(r.permutation(2 * 6 * 8 * 8).reshape(2, 6, 8, 8) / 384.0)
    d_nir = Tensor(r.permutation(2 * 6 * 8 * 8).reshape(2, 6, 8, 8) / 384.0)
    out["caim"] = _with_params(level, lambda: probe(level(d_rgb, d_nir)), [d_rgb, d_nir], r, samples=3)
    return out


def check_smrm(rng: RngContext) -> Dict[str, float]:
    widths = (4, 6, 8, 8)
    probe = _Probe(rng.spawn(0))
    r = rng.spawn(1)
    out = {}
    fmu = _cast(Fmu(r.spawn(2), 6))
    fmu.assign_names()
    m = _t(r, 2, 6, 4, 4)
    out["fmu"] = _with_params(fmu, lambda: probe(fmu(m)), [m], r, samples=4)
    mrb = _cast(Mrb(r.spawn(3), 6, 8, omega_init=0.5))
    mrb.assign_names()
    pair = (_t(r, 2, 6, 8, 8), _t(r, 2, 6, 8, 8))
    m_lvl, m_above = _t(r, 2, 6, 8, 8), _t(r, 2, 8, 4, 4)
    out["mrb_gate"] = _with_params(mrb, lambda: probe(mrb(m_lvl, pair, m_above)),
                                   [m_lvl, m_above, *pair], r, samples=3)
    smrm = _cast(Smrm(r.spawn(4), widths, omega_init=0.2))
    smrm.assign_names()
    fused = _pyramid(r, 2, widths, 16)
    pairs = [(_t(r, *f.shape), _t(r, *f.shape)) for f in fused]
    masks = [Tensor((r.random((2, 1, 64, 64)) < 0.2).astype(np.float64)) for _ in range(2)]
    out["smrm"] = _with_params(smrm, lambda: probe(smrm(fused, pairs, *masks)), fused, r, samples=3)
    return out


def miniature_config() -> ModelConfig:
    return ModelConfig(widths=(4, 6, 8, 8), stem_width=4, image_size=32, awp_grid=2,
                       alpha_init=0.3, awp_lambda_init=0.4, omega_init=0.2)


def check_model(rng: RngContext) -> Dict[str, float]:
    """Whole network at 32x32, BN in inference mode with randomised statistics."""
    cfg = miniature_config()
    model = build_model(cfg, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    r = rng.spawn(1)
    for name, p in model.named_parameters():
        if p.role == "bn_running_mean":
            p.data = r.normal(0.0, 0.1, p.shape)
        elif p.role == "bn_running_var":
            p.data = r.uniform(0.5, 1.5, p.shape)
    model.eval()
    imgs = [_t(r, 1, c, 32, 32, low=0.0, high=1.0) for c in (3, 3, 1, 1)]
    masks = [Tensor((r.random((1, 1, 32, 32)) < 0.2).astype(np.float64)) for _ in range(2)]
    label = (r.random((1, 1, 32, 32)) < 0.1).astype(np.float64)

    def run():
        return train_loss(model(*imgs, *masks), label)

    return {"model": _with_params(model, run, imgs, r, samples=2)}


GROUPS: Dict[str, Callable[[RngContext], Dict[str, float]]] = {
    "ops": check_ops,
    "ncem": check_ncem,
    "caim": check_caim,
    "smrm": check_smrm,
    "model": check_model,
}


def run_suite(seed: int = 0) -> Dict[str, Dict[str, float]]:
    """Return ``{group: {check: max relative error}}``."""
    root = RngContext(seed, 3)
    return {name: fn(root.spawn(i)) for i, (name, fn) in enumerate(GROUPS.items())}


def worst_per_group(results: Dict[str, Dict[str, float]]) -> Dict[str, float]:
    return {g: max(v.values()) for g, v in results.items()}


if __name__ == "__main__":
    t0 = time.time()
    res = run_suite(0)
    for g, checks in res.items():
        for k, v in checks.items():
            print(f"{g:6s} {k:16s} {v:.3e}")
    print(f"{time.time() - t0:.1f}s")
