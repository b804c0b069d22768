"""Error-aware Schrodinger bridge: forward marginals, targets, reverse recursion, guidance.

The arithmetic helpers work on numpy arrays and torch tensors alike.  ``t``
may be a python float, or a length-B vector for batched ``(B, C, H, W)``
inputs.  Error maps broadcast over channels.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from . import schedule as sch
from .denoiser import NumericError
from .tensorio import SeedSpec, gaussian_noise

TIME_MARGIN = 1e-4
WSC_CEIL = 1.0 - 1e-6
TARGET_MODES = ("eq5-consistent", "m-eps")


class DegenerateTimeError(ValueError):
    """Target requested at a time where the marginal variance vanishes."""


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance_scale: float = 6.0
    guidance_clamp: float = 0.3
    use_guidance: bool = True
    expert_split: float = 0.5
    grad_mode: str = "autograd"  # or "fd"
    fd_probes: int = 64
    chunk: int = 8
    clip_output: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_clamp <= 0:
            raise ValueError("guidance_clamp must be > 0")
        if not 0.0 < self.expert_split < 1.0:
            raise ValueError("expert_split must lie in (0, 1)")
        if self.grad_mode not in ("autograd", "fd"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


def _shape_m(M, x):
    if M.ndim == x.ndim - 1 and x.ndim == 4:
        return M[:, None]
    return M


def _coef(values, like):
    """Broadcast schedule coefficients against ``like``."""
    if np.ndim(values) == 0:
        return float(values)
    v = np.asarray(values, dtype=np.float64).reshape(-1, *([1] * (like.ndim - 1)))
    if isinstance(like, torch.Tensor):
        return torch.from_numpy(v).to(like.dtype)
    return v.astype(like.dtype)


def _times(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().double().numpy()
        return t if t.ndim else float(t)
    return t


def _sqrt(v, like):
    return math.sqrt(v) if isinstance(v, float) else (v.sqrt() if isinstance(v, torch.Tensor) else np.sqrt(v))


def _check_shapes(*arrs):
    ref = tuple(arrs[0].shape)
    for a in arrs[1:]:
        if tuple(a.shape) != ref:
            raise ValueError(f"shape mismatch: {ref} vs {tuple(a.shape)}")


def _check_map(M, x):
    if tuple(M.shape[-2:]) != tuple(x.shape[-2:]):
        raise ValueError(f"error map {tuple(M.shape)} does not match image {tuple(x.shape)}")


def forward_sample(sched, x0, x1, M, t, eps):
    """x_t = w0 x0 + w1 x1 + sqrt(Sigma_t) * (M * eps)."""
    _check_shapes(x0, x1, eps)
    _check_map(M, x0)
    c = sch.bridge_coeffs(sched, _times(t))
    w0, w1, sd = _coef(c.w0, x0), _coef(c.w1, x0), _sqrt(_coef(c.var, x0), x0)
    return w0 * x0 + w1 * x1 + sd * (_shape_m(M, x0) * eps)


def training_target(sched, x0, x1, M, t, eps, mode: str = "eq5-consistent"):
    """Regression target for the noise predictor.

    ``eq5-consistent`` returns (x_t - x0) / sqrt(Sigma_t) in closed form, which
    ``predict_x0`` inverts exactly; ``m-eps`` returns the bare reweighted noise.
    """
    _check_shapes(x0, x1, eps)
    tt = _times(t)
    c = sch.bridge_coeffs(sched, tt)
    if np.any(np.asarray(c.var) <= 0.0):
        raise DegenerateTimeError(f"Sigma_t = 0 at t={t!r}")
    Meps = _shape_m(M, x0) * eps
    if mode == "m-eps":
        return Meps
    if mode != "eq5-consistent":
        raise ValueError(f"unknown target mode {mode!r}")
    drift = _coef(np.asarray(c.w1) / np.sqrt(np.asarray(c.var)), x0)
    return drift * (x1 - x0) + Meps


def predict_x0(sched, x_t, eps_pred, t):
    c = sch.bridge_coeffs(sched, _times(t))
    return x_t - _sqrt(_coef(c.var, x_t), x_t) * eps_pred


def reverse_step(sched, x_t, x0_hat, M, t, dt, eps, guidance=None):
    """One ancestral step of the marginal-preserving posterior.

    ``guidance`` (already weighted) is added to the posterior mean before the
    stochastic term.
    """
    pc = sch.posterior_coeffs(sched, _times(t), _times(dt))
    mean = _coef(pc.wx0, x_t) * x0_hat + _coef(pc.wxt, x_t) * x_t
    if guidance is not None:
        mean = mean + guidance
    if np.all(np.asarray(pc.var) == 0.0):
        return mean
    return mean + _shape_m(M, x_t) * eps * _sqrt(_coef(pc.var, x_t), x_t)


def realness_log_prob(wsc, x, C):
    """Sum over pixels of log(1 - WSC(x, C)), with the classifier output capped below 1."""
    p = wsc(x, C).clamp(max=WSC_CEIL)
    return torch.log1p(-p).flatten(1).sum(dim=1)


def realness_grad(wsc, x0_hat, C):
    x = x0_hat.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        obj = realness_log_prob(wsc, x, C).sum()
        (g,) = torch.autograd.grad(obj, x)
    return g


def realness_grad_fd(wsc, x0_hat, C, M, n_probes=64, seed: SeedSpec | None = None, h=1e-3):
    """Central-difference gradient on ``n_probes`` pixels per item, stratified by M.

    Runs in float64; unprobed pixels get zero gradient.
    """
    seed = seed or SeedSpec(0)
    x = x0_hat.detach().double()
    Cd = C.detach().double()
    B, ch, H, W = x.shape
    Mf = _shape_m(M, x).reshape(B, -1).detach().cpu().numpy()
    g = torch.zeros_like(x)
    wsc64 = _as_double(wsc)
    with torch.no_grad():
        for b in range(B):
            order = np.argsort(Mf[b], kind="stable")
            strata = np.array_split(order, min(n_probes, order.size))
            rng = seed.child("fd", b).rng()
            probes = [int(s[rng.integers(0, s.size)]) for s in strata if s.size]
            for pix in probes:
                i, j = divmod(pix, W)
                for c in range(ch):
                    xp = x[b:b + 1].clone()
                    xm = x[b:b + 1].clone()
                    xp[0, c, i, j] += h
                    xm[0, c, i, j] -= h
                    fp = realness_log_prob(wsc64, xp, Cd[b:b + 1])
                    fm = realness_log_prob(wsc64, xm, Cd[b:b + 1])
                    g[b, c, i, j] = (fp - fm).item() / (2 * h)
    return g.to(x0_hat.dtype)


def _as_double(model):
    import copy
    m = copy.deepcopy(model).double()
    m.eval()
    return m


def guidance_term(x0_hat, C, M, var_hat, wsc, scale=6.0, clamp=0.3, grad_mode="autograd",
                  fd_probes=64, seed=None, return_score=False):
    """M * var_hat * clip(scale * grad log(1 - WSC(x0_hat, C)), -clamp, clamp)."""
    _check_map(M, x0_hat)
    if grad_mode == "fd":
        g = realness_grad_fd(wsc, x0_hat, C, M, fd_probes, seed)
    else:
        g = realness_grad(wsc, x0_hat, C)
    bound = torch.tensor(clamp, dtype=g.dtype)
    if float(bound) > clamp:  # e.g. float32(0.3) rounds up; stay inside the requested range
        bound = torch.nextafter(bound, torch.zeros_like(bound))
    score = torch.clamp(scale * g, -bound, bound)
    term = _shape_m(M, x0_hat) * _coef(var_hat, x0_hat) * score
    return (term, score) if return_score else term


def _call_denoiser(net, M, P, x, C, flag, t):
    B = x.shape[0]
    tt = torch.full((B,), float(t), dtype=x.dtype)
    with torch.no_grad():
        out = net(M, P, x, C, flag, tt)
    if not torch.all(torch.isfinite(out)):
        raise NumericError(f"denoiser returned non-finite values at t={t}")
    return out


def sample(sched, x1, C, P, M, denoisers, cfg: SamplerConfig, seeds, flag=None, wsc=None,
           trace=None):
    """Run the reverse bridge from x1 (t=1) down to t=0 and return the final x0 estimate.

    ``seeds`` holds one SeedSpec per batch item; item b's noise at step k is a
    pure function of ``seeds[b]`` and k.  ``denoisers`` is an ExpertPair, a
    single network, or any callable with the denoiser signature.
    """
    x1 = torch.as_tensor(x1, dtype=torch.float32)
    C = torch.as_tensor(C, dtype=torch.float32)
    P = torch.as_tensor(P, dtype=torch.float32)
    M = _shape_m(torch.as_tensor(M, dtype=torch.float32), x1)
    B = x1.shape[0]
    if len(seeds) != B:
        raise ValueError("need one seed per batch item")
    _check_map(M, x1)
    flag = torch.zeros(B) if flag is None else torch.as_tensor(flag, dtype=torch.float32).reshape(B)
    if cfg.use_guidance and wsc is None:
        raise ValueError("guidance enabled but no classifier supplied")
    grid = sch.time_grid(cfg.steps)
    x = x1.clone()
    x0_hat = x
    for k in range(cfg.steps):
        t, s = float(grid[k]), float(grid[k + 1])
        if hasattr(denoisers, "for_time"):
            net = denoisers.for_time(t) if t > 0 else denoisers.low
            which = "low" if t <= denoisers.split else "high"
        else:
            net, which = denoisers, "single"
        if trace is not None:
            trace.append({"t": t, "expert": which})
        eps_pred = _call_denoiser(net, M, P, x, C, flag, t)
        x0_hat = predict_x0(sched, x, eps_pred, t)
        if s == 0.0:
            break
        pc = sch.posterior_coeffs(sched, t, t - s)
        guide = None
        if cfg.use_guidance:
            guide = guidance_term(x0_hat, C, M, pc.var, wsc, cfg.guidance_scale, cfg.guidance_clamp,
                                  cfg.grad_mode, cfg.fd_probes, seeds[0].child("guide", k))
        noise = torch.from_numpy(np.stack([gaussian_noise(x1.shape[1:], sd, counter=k) for sd in seeds]))
        x = reverse_step(sched, x, x0_hat, M, t, t - s, noise, guidance=guide)
        if not torch.all(torch.isfinite(x)):
            raise NumericError(f"sampler diverged at t={t}")
    out = x0_hat.detach()
    return out.clamp(0.0, 1.0) if cfg.clip_output else out


def sample_many(sched, x1, C, P, M, denoisers, cfg: SamplerConfig, seeds, flags=None, wsc=None,
                threads: int = 1):
    """Sample a whole set in fixed chunks; results do not depend on ``threads``."""
    n = len(x1)
    flags = np.zeros(n, dtype=np.float32) if flags is None else np.asarray(flags, dtype=np.float32)
    starts = list(range(0, n, cfg.chunk))

    def work(a):
        b = min(a + cfg.chunk, n)
        return sample(sched, x1[a:b], C[a:b], P[a:b], M[a:b], denoisers, cfg, seeds[a:b],
                      flag=flags[a:b], wsc=wsc).numpy()

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(a) for a in starts]
    return np.concatenate(parts) if parts else np.zeros_like(np.asarray(x1))


class OracleDenoiser:
    """Returns the exact target (x_t - x0)/sqrt(Sigma_t) for the current x_t."""

    def __init__(self, sched, x0):
        self.sched = sched
        self.x0 = torch.as_tensor(x0, dtype=torch.float32)

    def __call__(self, M, P, x_t, C, flag, t):
        tt = float(t.reshape(-1)[0])
        var = sch.bridge_coeffs(self.sched, tt).var
        if var <= 0.0:
            return torch.zeros_like(x_t)
        return (x_t - self.x0) / math.sqrt(var)


@dataclass(frozen=True)
class BridgeTrainConfig:
    iters: int = 2000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    synth_fraction: float = 0.15
    target_mode: str = "eq5-consistent"
    expert_iters: int = 0
    expert_split: float = 0.5
    use_flag: bool = True
    lr_schedule: str = "constant"  # or "cosine" (decays to zero over the run)
    unit_map_fraction: float = 0.0  # share of batch items trained with M = 1

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.unit_map_fraction <= 1.0:
            raise ValueError("unit_map_fraction must lie in [0, 1]")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if self.batch < 1 or self.iters < 0 or self.expert_iters < 0:
            raise ValueError("batch >= 1, iters >= 0, expert_iters >= 0 required")
        if not 0.0 <= self.synth_fraction <= 1.0:
            raise ValueError("synth_fraction must lie in [0, 1]")


@dataclass
class BridgeData:
    """Training tensors; M is (N, 1, H, W)."""

    x0: torch.Tensor
    x1: torch.Tensor
    C: torch.Tensor
    P: torch.Tensor
    M: torch.Tensor
    flag: torch.Tensor

    @classmethod
    def from_arrays(cls, x0, x1, C, P, M, flag):
        f = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float32))
        Mt = f(M)
        if Mt.dim() == 3:
            Mt = Mt[:, None]
        return cls(f(x0), f(x1), f(C), f(P), Mt, f(flag).reshape(-1))

    def __len__(self):
        return self.x0.shape[0]


def draw_batch(data: BridgeData, cfg: BridgeTrainConfig, rng: np.random.Generator):
    """Indices for one batch with the configured share of synthetic-flagged items."""
    syn = np.flatnonzero(data.flag.numpy() > 0.5)
    real = np.flatnonzero(data.flag.numpy() <= 0.5)
    k_syn = int(round(cfg.synth_fraction * cfg.batch)) if syn.size else 0
    if real.size == 0:
        k_syn = cfg.batch
    pick = []
    if k_syn:
        pick.append(rng.choice(syn, size=k_syn, replace=syn.size < k_syn))
    k_real = cfg.batch - k_syn
    if k_real:
        pick.append(rng.choice(real, size=k_real, replace=real.size < k_real))
    return np.concatenate(pick)


def bridge_loss(model, sched, data: BridgeData, idx, t, eps, cfg: BridgeTrainConfig, unit_map=None):
    x0, x1, M = data.x0[idx], data.x1[idx], data.M[idx]
    if unit_map is not None and np.any(unit_map):
        M = torch.where(torch.from_numpy(np.asarray(unit_map)).reshape(-1, 1, 1, 1), torch.ones_like(M), M)
    x_t = forward_sample(sched, x0, x1, M, t, eps)
    target = training_target(sched, x0, x1, M, t, eps, cfg.target_mode)
    flag = data.flag[idx] if cfg.use_flag else torch.zeros(len(idx))
    pred = model(M, data.P[idx], x_t, data.C[idx], flag, torch.from_numpy(t).float())
    return torch.mean((pred - target) ** 2)


def train_bridge(data: BridgeData, model, sched, cfg: BridgeTrainConfig, seed: SeedSpec,
                 t_range=(TIME_MARGIN, 1.0 - TIME_MARGIN), iters=None, log=None):
    """Minimise the noise-regression loss with AdamW; returns the per-iteration losses."""
    if len(data) == 0:
        raise ValueError("empty training set")
    iters = cfg.iters if iters is None else iters
    lo, hi = max(t_range[0], TIME_MARGIN), min(t_range[1], 1.0 - TIME_MARGIN)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = seed.child("batches").rng()
    shape = tuple(data.x0.shape[1:])
    history = []
    model.train()
    for it in range(iters):
        if cfg.lr_schedule == "cosine":
            for group in opt.param_groups:
                group["lr"] = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / iters))
        idx = draw_batch(data, cfg, rng)
        t = rng.uniform(lo, hi, size=len(idx))
        eps = torch.from_numpy(rng.standard_normal((len(idx),) + shape, dtype=np.float32))
        unit_map = rng.uniform(size=len(idx)) < cfg.unit_map_fraction if cfg.unit_map_fraction > 0 else None
        loss = bridge_loss(model, sched, data, idx, t, eps, cfg, unit_map)
        if not torch.isfinite(loss):
            raise NumericError(f"bridge loss is {loss.item()} at iteration {it} (t={t.tolist()})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        history.append(float(loss.item()))
        if log is not None and (it % 100 == 0 or it == iters - 1):
            log(f"bridge it={it} loss={history[-1]:.6g}")
    model.eval()
    return history


def train_experts(data: BridgeData, base, sched, cfg: BridgeTrainConfig, seed: SeedSpec, log=None):
    """Fine-tune two copies of ``base`` on [margin, split] and [split, 1 - margin]."""
    from .denoiser import ExpertPair

    pair = ExpertPair.from_base(base, cfg.expert_split)
    hist_low = train_bridge(data, pair.low, sched, cfg, seed.child("expert-low"),
                            (TIME_MARGIN, cfg.expert_split), cfg.expert_iters, log)
    hist_high = train_bridge(data, pair.high, sched, cfg, seed.child("expert-high"),
                             (cfg.expert_split, 1.0 - TIME_MARGIN), cfg.expert_iters, log)
    return pair.eval(), hist_low, hist_high
