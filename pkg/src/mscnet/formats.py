"""On-disk formats: MMCT tensors, MSCK checkpoints, binary PGM/PPM images."""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import DataError

PathLike = Union[str, os.PathLike]

MMCT_MAGIC = b"MMCT"
MMCT_VERSION = 1
MSCK_MAGIC = b"MSCK"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- MMCT ---------------------------------------------------------------------


def encode_mmct(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dt not in _DTYPE_CODES:
        raise DataError(f"MMCT cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DataError("MMCT rank limited to 255")
    header = MMCT_MAGIC + struct.pack("<HBB", MMCT_VERSION, _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_mmct(buf: bytes, offset: int = 0, source: str = "<bytes>") -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MMCT_MAGIC:
        raise DataError(f"{source}: bad MMCT magic")
    if len(buf) < offset + 8:
        raise DataError(f"{source}: truncated MMCT header")
    version, code, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != MMCT_VERSION:
        raise DataError(f"{source}: unsupported MMCT version {version}")
    if code not in _CODE_DTYPES:
        raise DataError(f"{source}: unknown MMCT dtype code {code}")
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise DataError(f"{source}: truncated MMCT dims")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise DataError(f"{source}: truncated MMCT payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save_mmct(path: PathLike, arr: np.ndarray) -> None:
    atomic_write(path, encode_mmct(arr))


def load_mmct(path: PathLike) -> np.ndarray:
    buf = _read_bytes(path)
    arr, end = decode_mmct(buf, 0, str(path))
    if end != len(buf):
        raise DataError(f"{path}: trailing bytes after MMCT tensor")
    return arr


# -- MSCK ---------------------------------------------------------------------


def encode_checkpoint(entries: Dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(MSCK_MAGIC)
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(encode_mmct(arr))
    return out.getvalue()


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if buf[:4] != MSCK_MAGIC:
        raise DataError(f"{source}: not an MSCK checkpoint")
    if len(buf) < 8:
        raise DataError(f"{source}: truncated checkpoint header")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise DataError(f"{source}: truncated checkpoint entry")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        entries[name], pos = decode_mmct(buf, pos, f"{source}:{name}")
    if pos != len(buf):
        raise DataError(f"{source}: trailing bytes after checkpoint")
    return entries


def save_checkpoint(path: PathLike, entries: Dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_checkpoint(entries))


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_checkpoint(_read_bytes(path), str(path))


# -- PGM / PPM ---------------------------------------------------------------


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise DataError(f"PNM writer expects uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pgm(path: PathLike, img: np.ndarray) -> None:
    if np.asarray(img).ndim != 2:
        raise DataError(f"PGM needs a 2-D image, got shape {np.shape(img)}")
    atomic_write(path, encode_pnm(img))


def write_ppm(path: PathLike, img: np.ndarray) -> None:
    if np.asarray(img).ndim != 3:
        raise DataError(f"PPM needs an HxWx3 image, got shape {np.shape(img)}")
    atomic_write(path, encode_pnm(img))


def decode_pnm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode binary P5/P6 with maxval <= 255; header comments are allowed."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{source}: malformed PNM header")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise DataError(f"{source}: malformed PNM header")
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{source}: unsupported PNM type {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{source}: malformed PNM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise DataError(f"{source}: unsupported PNM geometry {w}x{h} maxval {maxval}")
    chans = 1 if magic == b"P5" else 3
    need = w * h * chans
    if n - pos < need:
        raise DataError(f"{source}: truncated image data ({n - pos} of {need} bytes)")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    arr = arr.reshape((h, w) if chans == 1 else (h, w, 3)).copy()
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return arr


def read_pnm(path: PathLike) -> np.ndarray:
    return decode_pnm(_read_bytes(path), str(path))
