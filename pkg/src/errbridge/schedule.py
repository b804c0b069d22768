"""Symmetric noise schedule and the analytic bridge coefficients.

The rate rises linearly from ``beta_min`` at t=0 to ``beta_max`` at t=0.5 and
mirrors back down, so every integral has a closed form.  All functions accept
python floats or numpy arrays of times and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Snap tolerance for "t - dt == 0" on float grids.
_ZERO_TOL = 1e-12


class DomainError(ValueError):
    """Time argument outside the schedule's domain."""


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 1.0
    form: str = "symmetric-linear"

    def __post_init__(self):
        if self.form != "symmetric-linear":
            raise ValueError(f"unsupported schedule form {self.form!r}")
        if not (0.0 <= self.beta_min < self.beta_max):
            raise ValueError("need 0 <= beta_min < beta_max")

    @property
    def total(self) -> float:
        """sigma^2(1), the integral of beta over [0, 1]."""
        return 2.0 * _half_integral(self, 0.5)


class BridgeCoeffs(NamedTuple):
    w0: float
    w1: float
    var: float


class PosteriorCoeffs(NamedTuple):
    wx0: float
    wxt: float
    var: float


def _check_time(t, lo=0.0, hi=1.0):
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < lo) or np.any(arr > hi):
        raise DomainError(f"time outside [{lo}, {hi}]: {t!r}")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def _half_integral(sched: NoiseSchedule, u):
    # integral of beta over [0, u] for u <= 0.5
    return sched.beta_min * u + (sched.beta_max - sched.beta_min) * u * u


def beta(sched: NoiseSchedule, t):
    tt = _check_time(t)
    u = np.minimum(tt, 1.0 - tt)
    return _out(sched.beta_min + 2.0 * (sched.beta_max - sched.beta_min) * u, t)


def sigma_sq(sched: NoiseSchedule, t):
    """Accumulated variance from 0 to t."""
    tt = _check_time(t)
    lower = _half_integral(sched, np.minimum(tt, 0.5))
    upper = sched.total - _half_integral(sched, np.minimum(1.0 - tt, 0.5))
    return _out(np.where(tt <= 0.5, lower, upper), t)


def sigma_bar_sq(sched: NoiseSchedule, t):
    """Accumulated variance from t to 1 (mirror of ``sigma_sq``)."""
    tt = _check_time(t)
    return _out(np.asarray(sigma_sq(sched, 1.0 - tt)), t)


def bridge_coeffs(sched: NoiseSchedule, t) -> BridgeCoeffs:
    """Mean weights and variance of the forward marginal at time t."""
    tt = _check_time(t)
    s = np.asarray(sigma_sq(sched, tt))
    sb = np.asarray(sigma_bar_sq(sched, tt))
    denom = s + sb
    return BridgeCoeffs(_out(sb / denom, t), _out(s / denom, t), _out(sb * s / denom, t))


def _resolve_step(t, dt):
    tt = _check_time(t)
    dd = np.asarray(dt, dtype=np.float64)
    if np.any(dd <= 0.0) or np.any(dd > tt + _ZERO_TOL):
        raise DomainError(f"need 0 < dt <= t, got t={t!r}, dt={dt!r}")
    prev = tt - dd
    prev = np.where(np.abs(prev) < _ZERO_TOL, 0.0, np.maximum(prev, 0.0))
    return tt, prev


def posterior_coeffs(sched: NoiseSchedule, t, dt) -> PosteriorCoeffs:
    """Brownian-bridge posterior q(x_{t-dt} | x0_hat, x_t).

    Marginal-preserving order: the weight on ``x0_hat`` is the fraction of
    variance removed by the step.
    """
    tt, prev = _resolve_step(t, dt)
    st = np.asarray(sigma_sq(sched, tt))
    sp = np.asarray(sigma_sq(sched, prev))
    wx0 = (st - sp) / st
    wxt = sp / st
    var = sp * (st - sp) / st
    return PosteriorCoeffs(_out(wx0, t), _out(wxt, t), _out(var, t))


def posterior_coeffs_printed(sched: NoiseSchedule, t, dt) -> PosteriorCoeffs:
    """Coefficient order with the two mean weights exchanged.

    Kept only so tests can show it fails to preserve the forward marginals.
    """
    good = posterior_coeffs(sched, t, dt)
    return PosteriorCoeffs(good.wxt, good.wx0, good.var)


def time_grid(steps: int) -> np.ndarray:
    """Uniform descending grid 1 = t_N > ... > t_0 = 0 (length steps+1)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.arange(steps, -1, -1, dtype=np.float64) / steps


def dump_rows(sched: NoiseSchedule, n: int = 101):
    """Rows of (t, beta, sigma^2, sigma_bar^2, Sigma_t) on a uniform grid."""
    ts = np.linspace(0.0, 1.0, n)
    b = beta(sched, ts)
    s = sigma_sq(sched, ts)
    sb = sigma_bar_sq(sched, ts)
    var = bridge_coeffs(sched, ts).var
    return [(float(ts[i]), float(b[i]), float(s[i]), float(sb[i]), float(var[i])) for i in range(n)]
