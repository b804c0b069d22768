"""Weakly-supervised error classifier (image-level labels plus a few boxes)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import box_raster
from .denoiser import NumericError
from .metrics import pr_curve  # noqa: F401  (re-exported)
from .tensorio import SeedSpec

EPS = 1e-6


class DegenerateAnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class WscSpec:
    channels: int = 16
    image_channels: int = 3


def _block(cin, cout, k=3, stride=1):
    """Conv, GroupNorm, SiLU: smooth everywhere, so finite differences stay accurate."""
    groups = 4 if cout % 4 == 0 else 1
    return [nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2), nn.GroupNorm(groups, cout), nn.SiLU()]


def _encoder(cin, c):
    return nn.ModuleDict({
        "full": nn.Sequential(*_block(cin, c)),
        "down": nn.Sequential(*_block(c, 2 * c, stride=2), *_block(2 * c, 2 * c, stride=2), *_block(2 * c, 2 * c)),
    })


class WscModel(nn.Module):
    """Separate image and garment encoders fused by feature products.

    The fused quarter-resolution features are upsampled and merged with the
    full-resolution branch before a 1x1 sigmoid head.
    """

    def __init__(self, spec: WscSpec = WscSpec()):
        super().__init__()
        self.spec = spec
        c, k = spec.channels, spec.image_channels
        self.img_enc = _encoder(k, c)
        self.garm_enc = _encoder(k, c)
        self.fuse = nn.Sequential(*_block(6 * c, 2 * c, k=1), *_block(2 * c, 2 * c))
        self.merge = nn.Sequential(*_block(2 * c + 3 * c, c, k=1), *_block(c, c))
        self.head = nn.Conv2d(c, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def logits(self, x, C):
        if C.shape[-2:] != x.shape[-2:]:
            C = F.interpolate(C, size=x.shape[-2:], mode="bilinear", align_corners=False)
        fi, fg = self.img_enc["full"](x), self.garm_enc["full"](C)
        di, dg = self.img_enc["down"](fi), self.garm_enc["down"](fg)
        h = self.fuse(torch.cat([di, dg, di * dg], dim=1))
        h = F.interpolate(h, size=x.shape[-2:], mode="bilinear", align_corners=False)
        h = self.merge(torch.cat([h, fi, fg, fi * fg], dim=1))
        return self.head(h)

    def forward(self, x, C):
        return torch.sigmoid(self.logits(x, C))


def error_map(model: WscModel, x, C) -> np.ndarray:
    """Per-pixel error confidence in (0, 1); accepts single images or batches."""
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    C = torch.as_tensor(np.asarray(C, dtype=np.float32))
    single = x.dim() == 3
    if single:
        x, C = x[None], C[None]
    if x.shape[0] != C.shape[0] or x.shape[1] != C.shape[1]:
        raise ValueError(f"image {tuple(x.shape)} and garment {tuple(C.shape)} do not pair up")
    with torch.no_grad():
        m = model(x, C)[:, 0].clamp(EPS, 1.0 - EPS).numpy()
    return m[0] if single else m


def batched_error_maps(model, x, C, chunk=32) -> np.ndarray:
    return np.concatenate([error_map(model, x[a:a + chunk], C[a:a + chunk]) for a in range(0, len(x), chunk)])


def _clamp(p):
    return p.clamp(EPS, 1.0 - EPS)


def loss_image(model, x1_unlabeled, x0_real, C_u, C_r=None):
    """-log max WSC(x1) - log(1 - max WSC(x0)), averaged over the batch."""
    C_r = C_u if C_r is None else C_r
    p1 = _clamp(model(x1_unlabeled, C_u).flatten(1).amax(dim=1))
    p0 = _clamp(model(x0_real, C_r).flatten(1).amax(dim=1))
    return torch.mean(-torch.log(p1) - torch.log1p(-p0))


def loss_patch_from_maps(p, raster):
    """Box-masked BCE: mean -log p inside boxes plus mean -log(1-p) outside, per image."""
    p = _clamp(p.flatten(1))
    r = raster.flatten(1)
    n_in = r.sum(dim=1)
    n_out = (1 - r).sum(dim=1)
    if torch.any(n_in == 0) or torch.any(n_out == 0):
        raise DegenerateAnnotationError("box union must be non-empty and must not cover the image")
    inside = -(torch.log(p) * r).sum(dim=1) / n_in
    outside = -(torch.log1p(-p) * (1 - r)).sum(dim=1) / n_out
    return torch.mean(inside + outside)


def loss_patch(model, x1_labeled, boxes, C):
    """``boxes`` is a list (one per image) of BoxAnnotation lists, or a raster tensor."""
    if isinstance(boxes, torch.Tensor):
        raster = boxes
    else:
        H, W = x1_labeled.shape[-2:]
        if not boxes or any(len(b) == 0 for b in boxes):
            raise DegenerateAnnotationError("every labelled image needs at least one box")
        raster = torch.from_numpy(np.stack([box_raster(b, H, W) for b in boxes]))
    return loss_patch_from_maps(model(x1_labeled, C)[:, 0], raster.float())


@dataclass(frozen=True)
class WscTrainConfig:
    iters: int = 1500
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    mode: str = "wsc"  # "wsc", "uc" (image loss only) or "cc" (composite patches)
    lr_schedule: str = "constant"  # or "cosine" (decays to zero over the run)

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.mode not in ("wsc", "uc", "cc"):
            raise ValueError(f"unknown WSC training mode {self.mode!r}")


@dataclass
class WscData:
    """Aligned tensors: unlabeled initial images, their real counterparts, garments."""

    x1_u: torch.Tensor
    x0_r: torch.Tensor
    C_u: torch.Tensor
    x1_l: torch.Tensor
    C_l: torch.Tensor
    raster_l: torch.Tensor

    @classmethod
    def from_corpus(cls, corpus):
        """Train-split tensors; labelled items supply the box rasters."""
        f = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float32))
        lab = np.flatnonzero(corpus.labeled)
        unl = np.flatnonzero(~corpus.labeled)
        H, W = corpus.x0.shape[-2:]
        rasters = np.stack([box_raster(corpus.boxes[corpus.ids[i]], H, W) for i in lab]) if lab.size else \
            np.zeros((0, H, W), np.float32)
        return cls(f(corpus.x1[unl]), f(corpus.x0[unl]), f(corpus.C[unl]),
                   f(corpus.x1[lab]), f(corpus.C[lab]), f(rasters))


def composite_batch(x0, x1, rng, side_frac=(0.15, 0.35)):
    """Paste a random patch of the initial image into the real image; label = patch box."""
    B, _, H, W = x0.shape
    out = x0.clone()
    raster = torch.zeros(B, H, W)
    for b in range(B):
        w = int(rng.integers(int(side_frac[0] * W), int(side_frac[1] * W) + 1))
        h = int(rng.integers(int(side_frac[0] * H), int(side_frac[1] * H) + 1))
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        out[b, :, y:y + h, x:x + w] = x1[b, :, y:y + h, x:x + w]
        raster[b, y:y + h, x:x + w] = 1.0
    return out, raster


def train_wsc(data: WscData, cfg: WscTrainConfig, seed: SeedSpec, spec: WscSpec = WscSpec(),
              model: WscModel | None = None, iters=None, log=None):
    """Minimise L_img (+ L_pat for ``wsc``/``cc``); returns (model, loss history)."""
    if len(data.x1_u) == 0 or len(data.x0_r) == 0:
        raise ValueError("unlabeled and real sets must be non-empty")
    if cfg.mode == "wsc" and len(data.x1_l) == 0:
        raise ValueError("weak supervision needs a labelled set")
    iters = cfg.iters if iters is None else iters
    if model is None:
        torch.manual_seed(seed.child("init").torch_seed())
        model = WscModel(spec)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = seed.child("batches").rng()
    history = []
    model.train()
    for it in range(iters):
        if cfg.lr_schedule == "cosine":
            for group in opt.param_groups:
                group["lr"] = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / iters))
        iu = rng.integers(0, len(data.x1_u), size=cfg.batch)
        ir = rng.integers(0, len(data.x0_r), size=cfg.batch)
        loss = loss_image(model, data.x1_u[iu], data.x0_r[ir], data.C_u[iu], data.C_u[ir])
        if cfg.mode == "wsc":
            il = rng.integers(0, len(data.x1_l), size=cfg.batch)
            loss = loss + loss_patch(model, data.x1_l[il], data.raster_l[il], data.C_l[il])
        elif cfg.mode == "cc":
            comp, raster = composite_batch(data.x0_r[iu], data.x1_u[iu], rng)
            loss = loss + loss_patch(model, comp, raster, data.C_u[iu])
        if not torch.isfinite(loss):
            raise NumericError(f"WSC loss is {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        history.append(float(loss.item()))
        if log is not None and (it % 100 == 0 or it == iters - 1):
            log(f"wsc[{cfg.mode}] it={it} loss={history[-1]:.6g}")
    model.eval()
    return model, history


def train_unsupervised_baseline(data: WscData, cfg: WscTrainConfig, seed: SeedSpec, spec: WscSpec = WscSpec(),
                                **kw):
    from dataclasses import replace
    return train_wsc(data, replace(cfg, mode="uc"), seed, spec, **kw)


def evaluate_ap(model, corpus) -> "object":
    """Pixel-level PR curve of the model's maps against the box rasters of ``corpus``."""
    maps = batched_error_maps(model, corpus.x1, corpus.C)
    return pr_curve(list(maps), corpus.gt_masks())
