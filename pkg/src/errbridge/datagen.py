"""Procedural toy corpus: dressed figures, flat garment views, and artifacts.

Every scene is a figure (head, arms, elliptical torso) on a uniform
background, wearing a garment whose texture is defined in canvas
coordinates.  The garment view ``C`` renders the same texture flat on white,
so a perfect refiner can recover ``x0`` inside any corrupted box from ``C``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensorio import SeedSpec, load_tensor, save_tensor

TEXTURES = ("stripes", "checker", "glyph-grid", "solid")
OPS = ("fade", "scramble", "warp")

# 5x7 bitmap glyphs
_FONT = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "F": ["11111", "10000", "10000", "11110", "10000", "10000", "10000"],
    "H": ["10001", "10001", "10001", "11111", "10001", "10001", "10001"],
    "K": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "L": ["10000", "10000", "10000", "10000", "10000", "10000", "11111"],
    "N": ["10001", "11001", "10101", "10011", "10001", "10001", "10001"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "X": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
    "Z": ["11111", "00001", "00010", "00100", "01000", "10000", "11111"],
}
_GLYPHS = np.stack([np.array([[c == "1" for c in row] for row in g]) for g in _FONT.values()])

# Minimum per-box mean squared change before a corruption counts as visible.
_MIN_BOX_CHANGE = 0.004


@dataclass(frozen=True)
class ToySceneSpec:
    side: int = 64
    textures: tuple = ("stripes", "checker", "glyph-grid")

    def __post_init__(self):
        bad = set(self.textures) - set(TEXTURES)
        if bad or not self.textures:
            raise ValueError(f"unknown textures {sorted(bad)}")
        if self.side < 16:
            raise ValueError("side must be >= 16")


@dataclass(frozen=True)
class CorruptionSpec:
    ops: tuple = OPS
    count: tuple = (1, 3)
    box_size: tuple = (8, 16)
    fade_strength: tuple = (0.7, 1.0)

    def __post_init__(self):
        if not self.ops or set(self.ops) - set(OPS):
            raise ValueError(f"ops must be a non-empty subset of {OPS}")
        if not (0 <= self.count[0] <= self.count[1] <= 3):
            raise ValueError("box count must lie in 0..3")


@dataclass(frozen=True)
class BoxAnnotation:
    x: int
    y: int
    w: int
    h: int

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]))


class Scene(NamedTuple):
    x0: np.ndarray
    C: np.ndarray
    P: np.ndarray
    garment: np.ndarray  # bool (H, W)
    texture: str


def box_raster(boxes, height: int, width: int) -> np.ndarray:
    """Binary union mask of boxes, float32 (H, W)."""
    out = np.zeros((height, width), dtype=np.float32)
    for b in boxes:
        if b.w < 1 or b.h < 1 or b.x < 0 or b.y < 0 or b.x + b.w > width or b.y + b.h > height:
            raise ValueError(f"box {b} outside {width}x{height} image")
        out[b.y:b.y + b.h, b.x:b.x + b.w] = 1.0
    return out


def _palette(rng):
    while True:
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        if np.abs(c0 - c1).max() >= 0.35:
            return c0, c1


def _texture(kind, S, rng):
    yy, xx = np.mgrid[0:S, 0:S]
    c0, c1 = _palette(rng)
    if kind == "solid":
        sel = np.zeros((S, S), dtype=bool)
    elif kind == "stripes":
        period = int(rng.integers(4, 7))
        coord = (yy, xx, xx + yy)[int(rng.integers(0, 3))] + int(rng.integers(0, period))
        sel = (coord % period) < period // 2
    elif kind == "checker":
        cell = int(rng.integers(3, 6))
        ox, oy = rng.integers(0, cell, size=2)
        sel = (((xx + ox) // cell) + ((yy + oy) // cell)) % 2 == 1
    else:  # glyph-grid
        ox, oy = rng.integers(0, 6), rng.integers(0, 8)
        gx, gy = (xx + ox) // 6, (yy + oy) // 8
        px, py = (xx + ox) % 6, (yy + oy) % 8
        ids = rng.integers(0, len(_GLYPHS), size=(gy.max() + 1, gx.max() + 1))
        inside = (px < 5) & (py < 7)
        sel = np.zeros((S, S), dtype=bool)
        g = _GLYPHS[ids[gy, gx]]
        sel[inside] = g[inside, np.minimum(py, 6)[inside], np.minimum(px, 4)[inside]]
    tex = np.where(sel[None], c1[:, None, None], c0[:, None, None])
    return tex.astype(np.float32)


def gen_sample(spec: ToySceneSpec, seed: SeedSpec) -> Scene:
    """Render (x0, C, P) plus the garment mask for one seed."""
    rng = seed.rng()
    S = spec.side
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    cx = S / 2 + rng.uniform(-0.03, 0.03) * S
    cy = rng.uniform(0.56, 0.6) * S
    a = rng.uniform(0.24, 0.30) * S
    b = rng.uniform(0.30, 0.35) * S
    torso = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    hr = 0.1 * S
    head = (xx - cx) ** 2 + (yy - (cy - b - 0.07 * S)) ** 2 <= hr * hr
    arms = np.zeros_like(torso)
    for sgn in (-1.0, 1.0):
        ax = cx + sgn * (a + 0.03 * S)
        arms |= ((xx - ax) / (0.06 * S)) ** 2 + ((yy - (cy - 0.04 * S)) / (0.25 * S)) ** 2 <= 1.0
    garment = torso
    figure = torso | head | arms

    kind = spec.textures[int(rng.integers(0, len(spec.textures)))]
    tex = _texture(kind, S, rng)
    bg = np.float32(rng.uniform(0.85, 0.95))
    skin = rng.uniform([0.75, 0.55, 0.45], [0.95, 0.75, 0.62]).astype(np.float32)

    x0 = np.full((3, S, S), bg, dtype=np.float32)
    x0[:, (head | arms) & ~garment] = skin[:, None]
    x0[:, garment] = tex[:, garment]
    C = np.ones((3, S, S), dtype=np.float32)
    C[:, garment] = tex[:, garment]
    P = figure.astype(np.float32)[None]
    return Scene(x0, C, P, garment, kind)


def _place_box(rng, region, wmin, wmax):
    H, W = region.shape
    for _ in range(200):
        w, h = rng.integers(wmin, wmax + 1, size=2)
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        if region[y:y + h, x:x + w].all():
            return BoxAnnotation(x, y, int(w), int(h))
    return None


def _apply_op(op, patch, rng, cspec):
    c, h, w = patch.shape
    if op == "fade":
        alpha = rng.uniform(*cspec.fade_strength)
        return _fade(patch, alpha)
    if op == "scramble":
        cell = 4 if min(h, w) >= 8 else 2
        ny, nx = h // cell, w // cell
        out = patch.copy()
        n = ny * nx
        perm = rng.permutation(n)
        while n > 1 and np.all(perm == np.arange(n)):
            perm = rng.permutation(n)
        for dst, src in enumerate(perm):
            dy, dx = divmod(dst, nx)
            sy, sx = divmod(int(src), nx)
            out[:, dy * cell:(dy + 1) * cell, dx * cell:(dx + 1) * cell] = \
                patch[:, sy * cell:(sy + 1) * cell, sx * cell:(sx + 1) * cell]
        return out
    # warp: local sinusoidal displacement, nearest-neighbour resampling
    amp = rng.uniform(1.5, 3.0)
    lam = rng.uniform(5.0, 10.0)
    ph = rng.uniform(0, 2 * math.pi, size=2)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    si = np.clip(np.rint(ii + amp * np.sin(2 * math.pi * jj / lam + ph[0])), 0, h - 1).astype(int)
    sj = np.clip(np.rint(jj + amp * np.sin(2 * math.pi * ii / lam + ph[1])), 0, w - 1).astype(int)
    return patch[:, si, sj]


def _fade(patch, alpha):
    mean = patch.reshape(patch.shape[0], -1).mean(axis=1, dtype=np.float64)[:, None, None]
    if alpha >= 1.0:
        return np.broadcast_to(mean, patch.shape).astype(np.float32)
    return ((1.0 - alpha) * patch + alpha * mean).astype(np.float32)


def corrupt(x0, cspec: CorruptionSpec, seed: SeedSpec, region=None):
    """Apply boxed corruptions; pixels outside the returned boxes are untouched.

    ``region`` restricts box placement (the garment mask); defaults to the
    whole image.
    """
    rng = seed.rng()
    x1 = np.array(x0, dtype=np.float32, copy=True)
    _, H, W = x1.shape
    if region is None:
        region = np.ones((H, W), dtype=bool)
    scale = H / 64.0
    wmin = max(2, int(round(cspec.box_size[0] * scale)))
    wmax = max(wmin, int(round(cspec.box_size[1] * scale)))
    count = int(rng.integers(cspec.count[0], cspec.count[1] + 1))
    boxes = []
    for _ in range(count):
        box = _place_box(rng, region, wmin, wmax)
        if box is None:
            continue
        sl = (slice(None), slice(box.y, box.y + box.h), slice(box.x, box.x + box.w))
        patch = x1[sl]
        for attempt in range(4):
            op = cspec.ops[int(rng.integers(0, len(cspec.ops)))]
            new = _apply_op(op, patch, rng, cspec)
            if np.mean((new - patch) ** 2) >= _MIN_BOX_CHANGE:
                break
        else:
            if "fade" in cspec.ops:
                new = _fade(patch, 1.0)
        x1[sl] = new
        boxes.append(box)
    return x1, boxes


@dataclass(frozen=True)
class SyntheticPair:
    C_hat: np.ndarray
    recon_err: float
    accepted: bool
    bg_var: float
    frontal: bool = True


# Rejection threshold on the garment-view reconstruction error; calibrated so
# roughly three quarters of default-strength pairs pass.
SYNTH_THRESHOLD = 1.0e-2


def gen_synthetic_pair(scene: Scene, seed: SeedSpec, strength: float = 1.0,
                       threshold: float = SYNTH_THRESHOLD) -> SyntheticPair:
    """Toy garment extraction: a degraded view of the true garment plus filtering."""
    rng = seed.rng()
    C = scene.C
    figure = scene.P[0] > 0.5
    bg_var = float(np.var(scene.x0[:, ~figure].astype(np.float64))) if (~figure).any() else 0.0
    if bg_var > 1e-6:
        raise AssertionError(f"background variance {bg_var} violates the clean-background criterion")

    noise_std = strength * rng.uniform(0.0, 0.12)
    amp = strength * rng.uniform(0.0, 1.5)
    tex = C
    if amp > 0:
        _, H, W = C.shape
        ii, jj = np.mgrid[0:H, 0:W]
        ph = rng.uniform(0, 2 * math.pi)
        si = np.clip(np.rint(ii + amp * np.sin(2 * math.pi * jj / 9.0 + ph)), 0, H - 1).astype(int)
        tex = C[:, si, jj]
    C_hat = np.array(C, copy=True)
    g = scene.garment
    noisy = tex[:, g] + noise_std * rng.standard_normal((C.shape[0], int(g.sum())))
    C_hat[:, g] = np.clip(noisy, 0.0, 1.0)
    err = float(np.mean((C_hat.astype(np.float64) - C) ** 2))
    return SyntheticPair(C_hat.astype(np.float32), err, err <= threshold, bg_var)


@dataclass(frozen=True)
class CorpusSpec:
    n: int = 640
    scene: ToySceneSpec = field(default_factory=ToySceneSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    labeled_fraction: float = 0.1
    test_fraction: float = 0.2
    synth_fraction: float = 0.15


@dataclass
class Item:
    id: str
    x0: np.ndarray
    x1: np.ndarray
    C: np.ndarray
    P: np.ndarray
    boxes: list
    synth_flag: bool
    split: str
    labeled: bool = False


def _split_plan(spec: CorpusSpec, seed: SeedSpec):
    n = spec.n
    n_test = int(round(spec.test_fraction * n))
    n_train = n - n_test
    rng = seed.child("plan").rng()
    train_ids = np.arange(n_train)
    n_lab = min(n_train, int(round(spec.labeled_fraction * n)))
    n_syn = min(n_train, int(round(spec.synth_fraction * n)))
    labeled = set(rng.permutation(train_ids)[:n_lab].tolist())
    synth = set(rng.permutation(train_ids)[:n_syn].tolist())
    return n_train, labeled, synth


def make_item(i: int, spec: CorpusSpec, seed: SeedSpec, n_train: int, labeled: set, synth: set) -> Item:
    s = seed.child("item", i)
    scene = gen_sample(spec.scene, s.child("scene"))
    x1, boxes = corrupt(scene.x0, spec.corruption, s.child("corrupt"), scene.garment)
    C = scene.C
    is_syn = i in synth
    if is_syn:
        for k in range(64):
            pair = gen_synthetic_pair(scene, s.child("synth", k))
            if pair.accepted:
                C = pair.C_hat
                break
    return Item(f"s{i:05d}", scene.x0, x1, C, scene.P, boxes, is_syn,
                "train" if i < n_train else "test", i in labeled)


def generate_items(spec: CorpusSpec, seed: SeedSpec, threads: int = 1) -> list:
    if spec.n < 1:
        raise ValueError("corpus needs n >= 1")
    n_train, labeled, synth = _split_plan(spec, seed)

    def work(i):
        return make_item(i, spec, seed, n_train, labeled, synth)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(work, range(spec.n)))
    return [work(i) for i in range(spec.n)]


def build_corpus(spec: CorpusSpec, seed: SeedSpec, out_dir, threads: int = 1) -> dict:
    """Write BFT1 tensors, manifest.json and annotations.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    items = generate_items(spec, seed, threads)
    entries, annotations = [], {}
    for it in items:
        rec = {"id": it.id}
        for key in ("x0", "x1", "C", "P"):
            rel = f"tensors/{it.id}_{key}.bft"
            save_tensor(getattr(it, key), out / rel)
            rec[key] = rel
        # boxes ship only for the hand-labelled training subset and the test split
        if it.labeled or it.split == "test":
            rec["boxes"] = [b.to_json() for b in it.boxes]
        if it.labeled:
            annotations[it.id] = rec["boxes"]
        rec["synth_flag"] = bool(it.synth_flag)
        rec["split"] = it.split
        entries.append(rec)
    manifest = {"side": spec.scene.side, "seed": [seed.root, seed.stream], "items": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out / "annotations.json").write_text(json.dumps(annotations, indent=1, sort_keys=True))
    return manifest


@dataclass
class Corpus:
    ids: list
    x0: np.ndarray
    x1: np.ndarray
    C: np.ndarray
    P: np.ndarray
    synth: np.ndarray
    split: np.ndarray
    boxes: dict  # id -> list[BoxAnnotation], labelled train items and all test items
    labeled: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "Corpus":
        idx = np.flatnonzero(mask)
        ids = [self.ids[i] for i in idx]
        return Corpus(ids, self.x0[idx], self.x1[idx], self.C[idx], self.P[idx], self.synth[idx],
                      self.split[idx], {k: v for k, v in self.boxes.items() if k in set(ids)},
                      self.labeled[idx])

    def train(self):
        return self.subset(self.split == "train")

    def test(self):
        return self.subset(self.split == "test")

    def gt_masks(self):
        H, W = self.x0.shape[-2:]
        return [box_raster(self.boxes[i], H, W) for i in self.ids]


def corpus_from_items(items) -> Corpus:
    boxes = {it.id: list(it.boxes) for it in items if it.labeled or it.split == "test"}
    return Corpus(
        [it.id for it in items],
        np.stack([it.x0 for it in items]),
        np.stack([it.x1 for it in items]),
        np.stack([it.C for it in items]),
        np.stack([it.P for it in items]),
        np.array([it.synth_flag for it in items]),
        np.array([it.split for it in items]),
        boxes,
        np.array([it.labeled for it in items]),
    )


def load_corpus(manifest_path) -> Corpus:
    path = Path(manifest_path)
    root = path.parent
    man = json.loads(path.read_text())
    items = []
    for rec in man["items"]:
        tens = {k: load_tensor(root / rec[k]) for k in ("x0", "x1", "C", "P")}
        boxes = [BoxAnnotation.from_json(b) for b in rec.get("boxes", [])]
        labeled = rec["split"] == "train" and "boxes" in rec
        items.append(Item(rec["id"], tens["x0"], tens["x1"], tens["C"], tens["P"], boxes,
                          bool(rec["synth_flag"]), rec["split"], labeled))
    return corpus_from_items(items)
