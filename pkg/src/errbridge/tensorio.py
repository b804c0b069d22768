"""Image tensors, counter-based seeding, and the BFT1 on-disk format.

Images are plain ``numpy.float32`` arrays in channel-major ``(C, H, W)``
layout; error maps are ``(H, W)`` arrays in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BFT1"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed tensor file or unsupported layout."""


def as_image(arr) -> np.ndarray:
    """Coerce to a finite float32 ``(C, H, W)`` array."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise FormatError(f"expected (C, H, W) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FormatError("tensor contains non-finite values")
    return a


def as_error_map(arr, like=None) -> np.ndarray:
    m = np.asarray(arr, dtype=np.float32)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise FormatError(f"error map must be (H, W), got {m.shape}")
    if np.any(~np.isfinite(m)) or m.min(initial=0.0) < 0.0 or m.max(initial=0.0) > 1.0:
        raise FormatError("error map values must lie in [0, 1]")
    if like is not None and m.shape != tuple(np.shape(like)[-2:]):
        raise FormatError(f"error map {m.shape} does not match image {np.shape(like)}")
    return m


def save_tensor(arr, path) -> None:
    a = as_image(arr)
    c, h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c, h, w))
        fh.write(a.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = c * h * w
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    a = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{path}: non-finite values")
    return a


def to_bytes8(arr) -> np.ndarray:
    """Clamp to [0, 1] and quantize with round-half-up."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def export_ppm(arr, path) -> None:
    """Write a binary PGM (1 channel) or PPM (3 channels)."""
    a = as_image(arr)
    c, h, w = a.shape
    if c not in (1, 3):
        raise FormatError(f"PPM export needs 1 or 3 channels, got {c}")
    data = to_bytes8(a)
    kind = b"P5" if c == 1 else b"P6"
    body = data[0] if c == 1 else np.transpose(data, (1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(kind + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(body).tobytes())


@dataclass(frozen=True)
class SeedSpec:
    """(root, stream) key of a Philox counter-based generator."""

    root: int
    stream: int = 0

    def rng(self, counter: int = 0) -> np.random.Generator:
        key = [self.root & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF]
        # draw index lives in the top counter word so sub-streams never overlap
        bg = np.random.Philox(key=key, counter=[0, 0, 0, counter & 0xFFFFFFFFFFFFFFFF])
        return np.random.Generator(bg)

    def child(self, *labels) -> "SeedSpec":
        """Derive an independent stream from string/int labels."""
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<QQ", self.root & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF))
        for lab in labels:
            h.update(b"\x00" + str(lab).encode())
        return SeedSpec(self.root, int.from_bytes(h.digest(), "little"))

    def torch_seed(self) -> int:
        return int(self.rng(0xFFFF).integers(0, 2**62))


def gaussian_noise(shape, seed: SeedSpec, counter: int = 0) -> np.ndarray:
    """i.i.d. standard normal float32 draws, a pure function of (shape, seed, counter)."""
    return seed.rng(counter).standard_normal(size=tuple(shape), dtype=np.float64).astype(np.float32)
