"""Image-quality and retrieval metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d

from .tensorio import SeedSpec

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FFD_RIDGE = 1e-6


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak 1.0; identical inputs give ``math.inf``."""
    m = mse(a, b)
    return math.inf if m == 0.0 else -10.0 * math.log10(m)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, window=None) -> np.ndarray:
    """Per-channel SSIM over all fully-contained window positions."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    win = gaussian_window() if window is None else window
    out = []
    for ca, cb in zip(a, b):
        mu_a = convolve2d(ca, win, mode="valid")
        mu_b = convolve2d(cb, win, mode="valid")
        saa = convolve2d(ca * ca, win, mode="valid") - mu_a ** 2
        sbb = convolve2d(cb * cb, win, mode="valid") - mu_b ** 2
        sab = convolve2d(ca * cb, win, mode="valid") - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
        out.append(num / den)
    return np.stack(out)


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


class FeatureExtractor:
    """Two fixed random conv layers with ReLU, averaged to a 64-d vector."""

    def __init__(self, feature_seed: int = 0, in_channels: int = 3, dim: int = 64):
        rng = SeedSpec(feature_seed, 0x46464400).rng()
        w1 = rng.standard_normal((16, in_channels, 5, 5)) / math.sqrt(in_channels * 25)
        b1 = 0.1 * rng.standard_normal(16)
        w2 = rng.standard_normal((dim, 16, 5, 5)) / math.sqrt(16 * 25)
        b2 = 0.1 * rng.standard_normal(dim)
        self.params = [torch.from_numpy(p) for p in (w1, b1, w2, b2)]

    def __call__(self, images) -> np.ndarray:
        x = torch.from_numpy(np.asarray(images, dtype=np.float64))
        w1, b1, w2, b2 = self.params
        with torch.no_grad():
            h = F.relu(F.conv2d(x, w1, b1, stride=2, padding=2))
            h = F.relu(F.conv2d(h, w2, b2, stride=2, padding=2))
            return h.mean(dim=(2, 3)).numpy()


def _sqrtm_psd(s):
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), via symmetric eigensolves."""
    r1 = _sqrtm_psd(s1)
    inner = r1 @ s2 @ r1
    inner = 0.5 * (inner + inner.T)
    tr_cross = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None))))
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    return max(d, 0.0)


def _moments(feats):
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(cov)


def ffd(set_a, set_b, feature_seed: int = 0):
    """Fixed-feature Frechet distance; returns (distance, ridge_applied)."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("ffd needs at least 2 images per set")
    ext = FeatureExtractor(feature_seed, in_channels=np.shape(set_a)[1])
    (m1, s1), (m2, s2) = _moments(ext(set_a)), _moments(ext(set_b))
    ridge = False
    for s in (s1, s2):
        if np.linalg.eigvalsh(s).min() < FFD_RIDGE:
            ridge = True
    if ridge:
        eye = FFD_RIDGE * np.eye(s1.shape[0])
        s1, s2 = s1 + eye, s2 + eye
    # order the pair canonically so the result is exactly symmetric
    if (m1.tobytes(), s1.tobytes()) > (m2.tobytes(), s2.tobytes()):
        m1, s1, m2, s2 = m2, s2, m1, s1
    return frechet_distance(m1, s1, m2, s2), ridge


@dataclass
class MetricReport:
    mse: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    ffd: float = 0.0
    ffd_ridge: bool = False

    @property
    def mean_mse(self):
        return float(np.mean(self.mse))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    def aggregate(self):
        finite = [p for p in self.psnr if math.isfinite(p)]
        return {"mse": self.mean_mse, "ssim": self.mean_ssim,
                "psnr": float(np.mean(finite)) if finite else math.inf,
                "ffd": self.ffd, "ffd_ridge": self.ffd_ridge, "n": len(self.mse)}

    def to_json(self, path):
        payload = {"aggregate": self.aggregate(), "per_sample": asdict(self)}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True, default=str)

    def to_csv(self, path, ids=None):
        ids = ids or [str(i) for i in range(len(self.mse))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "mse", "psnr", "ssim"])
            for row in zip(ids, self.mse, self.psnr, self.ssim):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def evaluate(outputs, targets, feature_seed: int = 0) -> MetricReport:
    rep = MetricReport()
    for o, t in zip(outputs, targets):
        rep.mse.append(mse(o, t))
        rep.psnr.append(psnr(o, t))
        rep.ssim.append(ssim(o, t))
    if len(outputs) >= 2:
        rep.ffd, rep.ffd_ridge = ffd(targets, outputs, feature_seed)
    return rep


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray  # nan where nothing is predicted positive
    recall: np.ndarray
    ap: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.rows():
                w.writerow([repr(t), repr(p), repr(r)])


def pr_curve(maps, gt_masks, n_thresholds: int = 256) -> PRCurve:
    """Pixel-level precision/recall with a pixel counted positive when score >= threshold."""
    if len(maps) != len(gt_masks):
        raise ValueError("maps and masks must pair up")
    scores, labels = [], []
    for m, g in zip(maps, gt_masks):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ValueError(f"map {m.shape} vs mask {g.shape}")
        scores.append(m.ravel())
        labels.append(g.ravel() > 0.5)
    s = np.concatenate(scores)
    y = np.concatenate(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("recall undefined: no positive pixels in any mask")
    thr = np.linspace(0.0, 1.0, n_thresholds)
    # bin k holds scores in [thr[k], thr[k+1]); counts at >= thr[k] are suffix sums
    idx = np.clip(np.searchsorted(thr, s, side="right") - 1, 0, n_thresholds - 1)
    pos_hist = np.bincount(idx[y], minlength=n_thresholds)
    all_hist = np.bincount(idx, minlength=n_thresholds)
    tp = np.cumsum(pos_hist[::-1])[::-1].astype(np.float64)
    pp = np.cumsum(all_hist[::-1])[::-1].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pp > 0, tp / pp, np.nan)
    recall = tp / n_pos
    # step-wise AP: sum over recall drops of the precision at the higher threshold side
    r_next = np.append(recall[1:], 0.0)
    p_use = np.nan_to_num(precision, nan=1.0)
    ap = float(np.sum((recall - r_next) * p_use))
    return PRCurve(thr, precision, recall, ap)
