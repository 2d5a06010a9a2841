"""Manifest reading and sample loading."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import DataError
from ..formats import read_pnm
from .synth import MANIFEST_NAME, SPLITS

MANIFEST_KEYS = ("id", "rgb_t1", "nir_t1", "rgb_t2", "nir_t2", "label", "mask_t1", "mask_t2", "split")
IMAGE_KEYS = ("rgb_t1", "rgb_t2", "nir_t1", "nir_t2")
BINARY_KEYS = ("label", "mask_t1", "mask_t2")


@dataclass
class BiTemporalSample:
    id: str
    split: str
    rgb_t1: np.ndarray  # float32 [3,H,W] in [0,1]
    rgb_t2: np.ndarray
    nir_t1: np.ndarray  # float32 [1,H,W]
    nir_t2: np.ndarray
    label: np.ndarray  # float32 [1,H,W] in {0,1}
    mask_t1: np.ndarray
    mask_t2: np.ndarray

    @property
    def size(self):
        return self.label.shape[1:]


def read_manifest(data_dir) -> List[Dict[str, str]]:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        missing = [k for k in MANIFEST_KEYS if k not in entry]
        if missing:
            raise DataError(f"{path}:{lineno}: missing keys {missing}")
        if entry["split"] not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {entry['split']!r}")
        entries.append(entry)
    return entries


def binarize(img: np.ndarray) -> np.ndarray:
    return (img >= 128).astype(np.float32)


def load_sample(entry: Dict[str, str], root=".") -> BiTemporalSample:
    """Read every file of one manifest entry; never returns a partial sample."""
    root = Path(root)
    arrays = {}
    size = None
    for key in IMAGE_KEYS + BINARY_KEYS:
        path = root / entry[key]
        img = read_pnm(path)
        want_rgb = key.startswith("rgb")
        if (img.ndim == 3) != want_rgb:
            raise DataError(f"{path}: expected {'RGB (P6)' if want_rgb else 'greyscale (P5)'} image")
        if size is None:
            size = img.shape[:2]
        elif img.shape[:2] != size:
            raise DataError(f"{path}: size {img.shape[:2]} differs from {size}")
        if key in BINARY_KEYS:
            arrays[key] = binarize(img)[None]
        elif want_rgb:
            arrays[key] = (img.astype(np.float32) / 255.0).transpose(2, 0, 1)
        else:
            arrays[key] = (img.astype(np.float32) / 255.0)[None]
    return BiTemporalSample(id=entry["id"], split=entry["split"], **arrays)


class Dataset:
    """All samples of one split held in memory."""

    def __init__(self, data_dir, split: Optional[str] = None, nir_channels: int = 1):
        self.root = Path(data_dir)
        entries = read_manifest(self.root)
        if split is not None:
            entries = [e for e in entries if e["split"] == split]
        self.entries = entries
        self.samples = [load_sample(e, self.root) for e in entries]
        self.nir_channels = nir_channels

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self, sample_id: str) -> BiTemporalSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DataError(f"sample {sample_id!r} not found in {self.root}")

    def batch(self, indices: Sequence[int], hflip: Optional[Sequence[bool]] = None) -> Dict[str, np.ndarray]:
        return collate([self.samples[i] for i in indices], hflip, self.nir_channels)


def collate(samples: Sequence[BiTemporalSample], hflip=None, nir_channels: int = 1) -> Dict[str, np.ndarray]:
    out = {}
    for key in IMAGE_KEYS + BINARY_KEYS:
        arrs = []
        for k, s in enumerate(samples):
            a = getattr(s, key)
            if hflip is not None and hflip[k]:
                a = a[..., ::-1]
            arrs.append(a)
        out[key] = np.ascontiguousarray(np.stack(arrs))
    if nir_channels == 3:
        for key in ("nir_t1", "nir_t2"):
            out[key] = np.repeat(out[key], 3, axis=1)
    return out
