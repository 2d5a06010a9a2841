"""Synthetic bi-temporal RGB+NIR scenes with sparse rectangular building changes.

Backgrounds are textured vegetation (bright in NIR); buildings are
rectangles (dark in NIR, grey/brown in RGB). Between t1 and t2 a sampled
set of buildings appears or disappears so that the changed-pixel ratio hits
a target drawn from a configurable bucket distribution. RGB at t2 gets a
global illumination jitter that leaves NIR untouched, and a chosen subset of
samples paints its changed buildings with the background colours so they
are visible only in NIR.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, DataError
from ..formats import atomic_write, encode_pnm
from ..rng import RngContext

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"
MIN_SIDE = 3

DEFAULT_BUCKETS = (
    {"max_pct": 1, "proportion": 0.35},
    {"max_pct": 2, "proportion": 0.30},
    {"max_pct": 3, "proportion": 0.10},
    {"max_pct": 4, "proportion": 0.07},
    {"max_pct": 5, "proportion": 0.05},
    {"max_pct": 6, "proportion": 0.04},
    {"max_pct": 7, "proportion": 0.03},
    {"max_pct": 8, "proportion": 0.02},
    {"max_pct": 9, "proportion": 0.02},
    {"max_pct": 10, "proportion": 0.02},
)


@dataclass
class GenConfig:
    count: int = 100
    size: int = 256
    seed: int = 0
    # proportions of *changed* images per change-ratio bucket (upper bound in percent)
    buckets: List[dict] = field(default_factory=lambda: [dict(b) for b in DEFAULT_BUCKETS])
    unchanged_fraction: float = 0.1
    illumination_jitter: float = 0.15
    camouflage_fraction: float = 0.0
    masks_include_camouflaged: bool = False
    mask_noise: int = 0
    distractors: Tuple[int, int] = (1, 4)
    veg_nir: Tuple[float, float] = (0.6, 0.9)
    building_nir: Tuple[float, float] = (0.1, 0.3)
    sensor_noise: float = 0.01
    split_ratio: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.distractors = tuple(self.distractors)
        self.veg_nir = tuple(self.veg_nir)
        self.building_nir = tuple(self.building_nir)
        self.split_ratio = tuple(self.split_ratio)
        self.buckets = [dict(b) for b in self.buckets]
        self.validate()

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.size < 32 or self.size % 32:
            raise ConfigError(f"size must be a positive multiple of 32, got {self.size}")
        props = [float(b["proportion"]) for b in self.buckets]
        if any(p < 0 for p in props) or sum(props) > 1 + 1e-9:
            raise ConfigError("bucket proportions must be non-negative and sum to <= 1")
        prev = 0.0
        for b in self.buckets:
            hi = float(b["max_pct"])
            if hi <= prev:
                raise ConfigError("bucket max_pct values must be strictly increasing")
            if hi > 50:
                raise ConfigError(f"change ratio {hi}% is unsatisfiable (must be <= 50%)")
            prev = hi
        for name in ("unchanged_fraction", "camouflage_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if abs(sum(self.split_ratio) - 1.0) > 1e-9 or min(self.split_ratio) < 0:
            raise ConfigError("split_ratio must be non-negative and sum to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class Building:
    y: int
    x: int
    h: int
    w: int
    in_t1: bool
    in_t2: bool
    camouflaged: bool = False

    @property
    def changed(self) -> bool:
        return self.in_t1 != self.in_t2

    @property
    def area(self) -> int:
        return self.h * self.w

    def overlaps(self, other: "Building", margin: int = 1) -> bool:
        return not (self.y + self.h + margin <= other.y or other.y + other.h + margin <= self.y
                    or self.x + self.w + margin <= other.x or other.x + other.w + margin <= self.x)


@dataclass
class SynthSample:
    id: str
    split: str
    rgb_t1: np.ndarray  # uint8 HxWx3
    rgb_t2: np.ndarray
    nir_t1: np.ndarray  # uint8 HxW
    nir_t2: np.ndarray
    label: np.ndarray  # uint8 HxW in {0, 255}
    mask_t1: np.ndarray
    mask_t2: np.ndarray
    buildings: List[Building]
    target_ratio: float
    camouflaged: bool


# -- allocation helpers ----------------------------------------------------------------


def largest_remainder(weights: Sequence[float], total: int) -> List[int]:
    """Integer counts proportional to ``weights`` summing exactly to ``total``."""
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() <= 0:
        return [0] * len(w)
    raw = w / w.sum() * total
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base.tolist()


def interleave(counts: Sequence[int]) -> List[int]:
    """Spread class labels evenly over a sequence with exactly ``counts`` of each."""
    n = sum(counts)
    assigned = [0] * len(counts)
    seq = []
    for k in range(n):
        deficits = [c * (k + 1) / n - a for c, a in zip(counts, assigned)]
        j = int(np.argmax(deficits))
        assigned[j] += 1
        seq.append(j)
    return seq


def plan_dataset(cfg: GenConfig) -> List[dict]:
    """Decide per-sample change bucket, camouflage flag and split."""
    rng = RngContext(cfg.seed, 0)
    n = cfg.count
    n_unchanged = int(round(cfg.unchanged_fraction * n))
    n_changed = n - n_unchanged
    props = [float(b["proportion"]) for b in cfg.buckets]
    if n_changed and sum(props) <= 0:
        raise ConfigError("changed samples requested but every bucket proportion is zero")
    per_bucket = largest_remainder(props, n_changed)
    kinds = [None] * n_unchanged
    for bi, k in enumerate(per_bucket):
        kinds += [bi] * k
    n_camo = int(round(cfg.camouflage_fraction * n_changed))
    camo = [False] * n_unchanged + [True] * n_camo + [False] * (n_changed - n_camo)
    # independent shuffles so camouflage is not tied to a bucket
    kinds_changed = [kinds[i] for i in range(n_unchanged, n)]
    kinds_changed = [kinds_changed[i] for i in rng.permutation(n_changed)]
    kinds = kinds[:n_unchanged] + kinds_changed

    # stratify splits over (unchanged, plain, camouflaged) groups
    groups = [0 if k is None else (2 if c else 1) for k, c in zip(kinds, camo)]
    order = sorted(range(n), key=lambda i: (groups[i], int(rng.integers(0, 1 << 30))))
    seq = interleave(largest_remainder(cfg.split_ratio, n))
    splits = [""] * n
    for pos, i in enumerate(order):
        splits[i] = SPLITS[seq[pos]]

    slots = rng.permutation(n)
    plan = []
    for slot in range(n):
        i = int(slots[slot])
        plan.append({"bucket": kinds[i], "camouflaged": camo[i], "split": splits[i]})
    return plan


# -- scene synthesis ----------------------------------------------------------------------


def _smooth_noise(rng: RngContext, size: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, (cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _background(rng: RngContext, cfg: GenConfig) -> Tuple[np.ndarray, np.ndarray]:
    s = cfg.size
    tex = 0.6 * _smooth_noise(rng, s, max(2, s // 32)) + 0.4 * _smooth_noise(rng, s, max(4, s // 8))
    lo, hi = cfg.veg_nir
    nir = lo + (hi - lo) * tex
    rgb = np.stack([0.12 + 0.15 * tex, 0.32 + 0.22 * tex, 0.08 + 0.12 * tex], axis=-1)
    return rgb, nir


def _place(rng: RngContext, size: int, h: int, w: int, existing: List[Building],
           in_t1: bool, in_t2: bool, tries: int = 300) -> Optional[Building]:
    if h > size - 2 or w > size - 2:
        return None
    for _ in range(tries):
        y = rng.integers(1, size - h)
        x = rng.integers(1, size - w)
        b = Building(y, x, h, w, in_t1, in_t2)
        if not any(b.overlaps(o) for o in existing):
            return b
    return None


def _dims_for_area(rng: RngContext, area: int, max_side: int) -> Tuple[int, int]:
    best = None
    for w in range(MIN_SIDE, max_side + 1):
        h = int(round(area / w))
        if h < MIN_SIDE or h > max_side or max(h, w) > 3 * min(h, w):
            continue
        err = abs(h * w - area)
        key = (err, rng.random())
        if best is None or key < best[0]:
            best = (key, h, w)
    if best is None:
        side = int(np.clip(round(np.sqrt(area)), MIN_SIDE, max_side))
        return side, side
    return best[1], best[2]


def _bucket_range(cfg: GenConfig, bucket: int) -> Tuple[float, float]:
    hi = float(cfg.buckets[bucket]["max_pct"]) / 100.0
    lo = float(cfg.buckets[bucket - 1]["max_pct"]) / 100.0 if bucket > 0 else 0.0
    return lo, hi


def _layout_changes(rng: RngContext, cfg: GenConfig, target_px: int,
                    buildings: List[Building], bounds_px: Tuple[float, float]) -> Optional[List[Building]]:
    s = cfg.size
    max_side = max(MIN_SIDE + 1, s // 5)
    placed: List[Building] = []
    changed = 0
    # within 10% of the target and strictly inside the bucket
    lo_ok = max(0.9 * target_px, bounds_px[0] + 1)
    hi_ok = min(1.1 * target_px, bounds_px[1])
    while changed < lo_ok:
        rem = target_px - changed
        max_area = max_side * max_side
        if rem <= max_area:
            area = rem
        else:
            area = int(rng.uniform(max(MIN_SIDE * MIN_SIDE * 4, max_area // 6), max_area))
            area = min(area, rem - MIN_SIDE * MIN_SIDE)
        area = max(area, MIN_SIDE * MIN_SIDE)
        h, w = _dims_for_area(rng, area, max_side)
        added = rng.random() < 0.5
        b = _place(rng, s, h, w, buildings + placed, in_t1=not added, in_t2=added)
        if b is None:
            return None
        placed.append(b)
        changed += b.area
    if changed > hi_ok:
        return None
    return placed


def _paint(rgb, nir, b: Building, colour, nir_val, noise):
    sl = (slice(b.y, b.y + b.h), slice(b.x, b.x + b.w))
    if colour is not None:
        rgb[sl] = colour + noise[sl][..., None] * 0.5
    nir[sl] = nir_val + noise[sl] * 0.5


def _footprint(buildings: List[Building], size: int, time: int, visible_only: bool = False) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    for b in buildings:
        if (b.in_t1 if time == 1 else b.in_t2) and not (visible_only and b.camouflaged):
            m[b.y : b.y + b.h, b.x : b.x + b.w] = True
    return m


def _perturb_mask(rng: RngContext, m: np.ndarray, px: int) -> np.ndarray:
    if px <= 0:
        return m
    out = m.copy()
    shifted = np.zeros_like(m)
    for dy in range(-px, px + 1):
        for dx in range(-px, px + 1):
            shifted |= np.roll(np.roll(m, dy, 0), dx, 1)
    if rng.random() < 0.5:
        out = shifted  # dilation
    else:
        eroded = np.ones_like(m)
        for dy in range(-px, px + 1):
            for dx in range(-px, px + 1):
                eroded &= np.roll(np.roll(m, dy, 0), dx, 1)
        out = eroded
    return out


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def synthesize_sample(cfg: GenConfig, index: int, plan: dict) -> SynthSample:
    rng = RngContext(cfg.seed, 1, index)
    s = cfg.size
    total = s * s
    bg_rgb, bg_nir = _background(rng, cfg)

    buildings: List[Building] = []
    for _ in range(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1)):
        side_max = max(MIN_SIDE + 1, s // 6)
        h, w = (rng.integers(MIN_SIDE + 1, side_max + 1) for _ in range(2))
        b = _place(rng, s, h, w, buildings, True, True)
        if b is not None:
            buildings.append(b)

    target_ratio = 0.0
    bucket = plan["bucket"]
    if bucket is not None:
        lo, hi = _bucket_range(cfg, bucket)
        floor = 1.25 * MIN_SIDE * MIN_SIDE / total
        margin = 0.1 * (hi - lo)
        t_lo, t_hi = max(lo + margin, floor), hi - margin
        if t_lo > t_hi:
            raise ConfigError(f"bucket ({lo:.2%}, {hi:.2%}] cannot be met at size {s}")
        for _attempt in range(50):
            target_ratio = rng.uniform(t_lo, t_hi)
            placed = _layout_changes(rng, cfg, int(round(target_ratio * total)), buildings,
                                     (lo * total, hi * total))
            if placed is not None:
                break
        else:
            raise ConfigError(f"could not lay out a {target_ratio:.2%} change at size {s}")
        for b in placed:
            b.camouflaged = plan["camouflaged"]
        buildings += placed

    rgb = [bg_rgb.copy(), bg_rgb.copy()]
    nir = [bg_nir.copy(), bg_nir.copy()]
    palette = np.array([[0.55, 0.55, 0.55], [0.48, 0.36, 0.26], [0.70, 0.68, 0.64], [0.40, 0.40, 0.44]])
    nlo, nhi = cfg.building_nir
    for b in buildings:
        colour = None if b.camouflaged else palette[rng.integers(0, len(palette))] + rng.uniform(-0.04, 0.04, 3)
        nir_val = rng.uniform(nlo, nhi)
        tex = rng.normal(0.0, 0.02, (s, s))
        for t, present in enumerate((b.in_t1, b.in_t2)):
            if present:
                _paint(rgb[t], nir[t], b, colour, nir_val, tex)

    a = cfg.illumination_jitter
    gain = 1.0 + rng.uniform(-a, a)
    offset = rng.uniform(-a / 3, a / 3)
    rgb[1] = rgb[1] * gain + offset
    for t in range(2):
        rgb[t] = rgb[t] + rng.normal(0.0, cfg.sensor_noise, rgb[t].shape)
        nir[t] = nir[t] + rng.normal(0.0, cfg.sensor_noise, nir[t].shape)

    fp1, fp2 = _footprint(buildings, s, 1), _footprint(buildings, s, 2)
    label = np.logical_xor(fp1, fp2)
    visible = not cfg.masks_include_camouflaged
    m1 = _perturb_mask(rng, _footprint(buildings, s, 1, visible), cfg.mask_noise)
    m2 = _perturb_mask(rng, _footprint(buildings, s, 2, visible), cfg.mask_noise)
    return SynthSample(
        id=f"s{index:05d}",
        split=plan["split"],
        rgb_t1=_to_u8(rgb[0]), rgb_t2=_to_u8(rgb[1]),
        nir_t1=_to_u8(nir[0]), nir_t2=_to_u8(nir[1]),
        label=label.astype(np.uint8) * 255,
        mask_t1=m1.astype(np.uint8) * 255, mask_t2=m2.astype(np.uint8) * 255,
        buildings=buildings, target_ratio=target_ratio,
        camouflaged=bool(plan["camouflaged"] and bucket is not None),
    )


_FILES = (
    ("rgb_t1", "ppm"), ("nir_t1", "pgm"), ("rgb_t2", "ppm"), ("nir_t2", "pgm"),
    ("label", "pgm"), ("mask_t1", "pgm"), ("mask_t2", "pgm"),
)


def _write_sample(out: Path, sample: SynthSample) -> Dict[str, str]:
    entry = {"id": sample.id}
    for key, ext in _FILES:
        rel = f"images/{sample.id}_{key}.{ext}"
        atomic_write(out / rel, encode_pnm(getattr(sample, key)))
        entry[key] = rel
    entry["split"] = sample.split
    return entry


def generate_dataset(cfg: GenConfig, out_dir, threads: int = 1) -> List[Dict[str, str]]:
    """Write images and ``manifest.jsonl`` under ``out_dir``; return the manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: {exc.strerror}") from exc
    plan = plan_dataset(cfg)

    def work(i):
        return _write_sample(out, synthesize_sample(cfg, i, plan[i]))

    try:
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                manifest = list(pool.map(work, range(cfg.count)))
        else:
            manifest = [work(i) for i in range(cfg.count)]
        lines = "".join(json.dumps(e) + "\n" for e in manifest)
        atomic_write(out / MANIFEST_NAME, lines.encode("utf-8"))
    except OSError as exc:
        raise DataError(f"{out}: {exc.strerror or exc}") from exc
    log.info("wrote %d samples to %s", cfg.count, out)
    return manifest
