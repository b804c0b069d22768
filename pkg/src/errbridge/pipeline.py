"""Glue between corpus, classifier, and bridge used by the CLI and the experiments."""

from __future__ import annotations

import numpy as np
import torch

from . import bridge as br
from .denoiser import Denoiser, DenoiserSpec, ExpertPair
from .tensorio import SeedSpec
from .wsc import batched_error_maps

ABLATIONS = ("m-ones", "rand-m", "no-guidance", "inpaint", "warped-aug")


def item_seeds(seed: SeedSpec, ids, label="sample"):
    return [seed.child(label, i) for i in ids]


def make_denoiser(spec: DenoiserSpec, seed: SeedSpec) -> Denoiser:
    torch.manual_seed(seed.child("denoiser-init").torch_seed())
    return Denoiser(spec)


def compute_maps(wsc, corpus) -> np.ndarray:
    return batched_error_maps(wsc, corpus.x1, corpus.C)


def random_maps(shape, seeds) -> np.ndarray:
    """Uniform per-pixel maps, one independent stream per item."""
    return np.stack([s.child("rand-m").rng().uniform(0.0, 1.0, size=shape) for s in seeds]).astype(np.float32)


def inpaint_mask(maps, cell: int = 8, level: float = 0.5) -> np.ndarray:
    """Binary mask of cells whose mean error confidence exceeds ``level``."""
    maps = np.asarray(maps, dtype=np.float32)
    N, H, W = maps.shape
    out = np.zeros_like(maps)
    for y in range(0, H, cell):
        for x in range(0, W, cell):
            blk = maps[:, y:y + cell, x:x + cell]
            hit = blk.reshape(N, -1).mean(axis=1) > level
            out[hit, y:y + cell, x:x + cell] = 1.0
    return out


def inpaint_inputs(x1, maps, seeds):
    """Replace masked cells of x1 by noise; the bridge then regenerates them from scratch."""
    mask = inpaint_mask(maps)
    x1 = np.asarray(x1, dtype=np.float32)
    noise = np.stack([s.child("inpaint").rng().standard_normal(x1.shape[1:]) for s in seeds]).astype(np.float32)
    filled = np.clip(0.5 + 0.25 * noise, 0.0, 1.0)
    return (x1 * (1 - mask[:, None]) + filled * mask[:, None]).astype(np.float32), mask


def warped_garments(corpus, seed: SeedSpec):
    """Warped-augmentation control: synthetic items get a randomly warped crop of x0 as garment."""
    C = np.array(corpus.C, copy=True)
    for i in np.flatnonzero(corpus.synth):
        rng = seed.child("warp", corpus.ids[i]).rng()
        x0 = corpus.x0[i]
        garment = np.abs(corpus.C[i] - 1.0).max(axis=0) > 0  # non-white pixels of the true view
        _, H, W = x0.shape
        ii, jj = np.mgrid[0:H, 0:W]
        dx = int(rng.integers(-4, 5))
        dy = int(rng.integers(-4, 5))
        amp = rng.uniform(1.0, 3.0)
        si = np.clip(ii + dy + np.rint(amp * np.sin(jj / 5.0)).astype(int), 0, H - 1)
        sj = np.clip(jj + dx, 0, W - 1)
        warped = x0[:, si, sj]
        C[i] = np.where(garment[None], warped, 1.0)
    return C


def fit_bridge(data: br.BridgeData, den_spec: DenoiserSpec, sched, cfg: br.BridgeTrainConfig, seed: SeedSpec,
               log=None):
    """Base training over the full time range, then optional expert fine-tuning."""
    base = make_denoiser(den_spec, seed)
    history = br.train_bridge(data, base, sched, cfg, seed.child("base"), log=log)
    if cfg.expert_iters > 0:
        pair, hl, hh = br.train_experts(data, base, sched, cfg, seed, log=log)
        return pair, {"base": history, "low": hl, "high": hh}
    return ExpertPair(base, base, cfg.expert_split), {"base": history}


def refine(sched, x1, C, P, maps, flags, denoisers, sampler_cfg, seeds, wsc=None, threads=1):
    return br.sample_many(sched, x1, C, P, maps, denoisers, sampler_cfg, seeds, flags,
                          wsc=wsc if sampler_cfg.use_guidance else None, threads=threads)
