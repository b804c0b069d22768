"""Noise-prediction network with the (M, P, x_t, C, flag; t) input contract."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericError(RuntimeError):
    """Non-finite loss or gradient."""


@dataclass(frozen=True)
class DenoiserSpec:
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 64
    cond_mode: str = "concat-channels"
    image_channels: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.cond_mode != "concat-channels":
            raise ValueError(f"unsupported cond_mode {self.cond_mode!r}")

    @property
    def in_channels(self):
        # x_t, M, P, C, flag plane
        return 2 * self.image_channels + 3

    def receptive_field(self) -> int:
        """Receptive field (pixels) of the encoder path."""
        rf, jump = 3, 1  # stem
        for _ in range(self.depth):
            rf += 4 * jump  # two 3x3 convs
            rf += 2 * jump  # stride-2 3x3 conv
            jump *= 2
        rf += 4 * jump  # middle block
        return rf


class TimeEmbedding(nn.Module):
    """Sinusoidal features of t on a geometric frequency ladder."""

    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
        self.register_buffer("freqs", freqs, persistent=False)
        self.dim = dim

    def forward(self, t):
        arg = t.reshape(-1, 1).to(self.freqs.dtype) * self.freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.film = nn.Linear(temb, 2 * ch)
        self.norm2 = nn.GroupNorm(min(8, ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return x + h


class Denoiser(nn.Module):
    """Small encoder-decoder predicting the error-adapted noise."""

    def __init__(self, spec: DenoiserSpec = DenoiserSpec()):
        super().__init__()
        self.spec = spec
        c, d, te = spec.base_channels, spec.depth, spec.time_embed_dim
        chans = [c * 2 ** min(i, 3) for i in range(d + 1)]
        self.time = TimeEmbedding(te)
        self.time_mlp = nn.Sequential(nn.Linear(te, te), nn.SiLU(), nn.Linear(te, te))
        self.stem = nn.Conv2d(spec.in_channels, c, 3, padding=1)
        self.enc = nn.ModuleList(ResBlock(chans[i], te) for i in range(d))
        self.down = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(d))
        self.mid = ResBlock(chans[d], te)
        self.up = nn.ModuleList(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1) for i in range(d))
        self.merge = nn.ModuleList(nn.Conv2d(2 * chans[i], chans[i], 1) for i in range(d))
        self.dec = nn.ModuleList(ResBlock(chans[i], te) for i in range(d))
        self.out_norm = nn.GroupNorm(min(8, c), c)
        self.head = nn.Conv2d(c, spec.image_channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, M, P, x_t, C, flag, t):
        B, _, H, W = x_t.shape
        if M.shape[-2:] != (H, W) or P.shape[-2:] != (H, W):
            raise ValueError(f"M {tuple(M.shape)} / P {tuple(P.shape)} do not match x_t {tuple(x_t.shape)}")
        if M.dim() == 3:
            M = M[:, None]
        if C.shape[-2:] != (H, W):
            C = F.interpolate(C, size=(H, W), mode="bilinear", align_corners=False)
        flag = torch.as_tensor(flag, dtype=x_t.dtype, device=x_t.device).reshape(-1, 1, 1, 1)
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1).expand(B)
        h = torch.cat([x_t, M, P, C, flag.expand(B, 1, H, W)], dim=1)
        emb = self.time_mlp(self.time(t))
        h = self.stem(h)
        skips = []
        for blk, down in zip(self.enc, self.down):
            h = blk(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for i in reversed(range(len(self.dec))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[i](h)
            s = skips[i]
            if h.shape[-2:] != s.shape[-2:]:
                h = h[..., : s.shape[-2], : s.shape[-1]]
            h = self.merge[i](torch.cat([h, s], dim=1))
            h = self.dec[i](h, emb)
        return self.head(F.silu(self.out_norm(h)))


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_gradient(model: nn.Module, batch, loss_fn) -> dict:
    """Gradient of ``loss_fn(model, batch)`` w.r.t. every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        out[name] = g.detach()
    return out


class ExpertPair:
    """Two denoisers split in time; t == split is served by ``low``."""

    def __init__(self, low: Denoiser, high: Denoiser, split: float = 0.5):
        if not 0.0 < split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        self.low, self.high, self.split = low, high, split

    @classmethod
    def from_base(cls, base: Denoiser, split: float = 0.5):
        return cls(copy.deepcopy(base), copy.deepcopy(base), split)

    def select(self, t: float) -> str:
        return "low" if t <= self.split else "high"

    def for_time(self, t: float) -> Denoiser:
        return self.low if t <= self.split else self.high

    def eval(self):
        self.low.eval()
        self.high.eval()
        return self


def single_expert(model: Denoiser) -> ExpertPair:
    """Wrap one network so the sampler can treat it as an expert pair."""
    pair = ExpertPair(model, model)
    return pair
