"""Forward noising, score ratios, score-entropy loss, and the ODE sampler step.

The forward process is the standard variance-preserving chain

    z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps,    abar_t = prod_k (1 - beta_k)

with a linear beta schedule.  The score quantity this codebase trains is a
density *ratio* rather than a gradient: for a noisy state z_t and a candidate
clean state z_0 the true ratio has the closed form

    log r = ||z_t||^2 / 2 - ||z_t - sqrt(abar_t) z_0||^2 / (2 (1 - abar_t))

(a ratio of the two Gaussian densities involved, up to a t-only constant).
All ratio math is done in log space; exponentiation is guarded.

The score-entropy loss for predicted ratios s against true ratios r is

    se = sum_k omega_k (s_k - r_k log s_k + K(r_k)),   K(a) = a (log a - 1)

which is nonnegative term by term and zero exactly at s = r.

The sampler step is an explicit second-order (trapezoid) update running time
backward:

    z_tilde  = z_t - dt f(z_t, t)
    z_{t-dt} = z_t - (dt/2) [ f(z_t, t) + f(z_tilde, t - dt) ]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .codec import LatentSequence
from .numerics import ArgumentError, NumericsError

_LOG_RATIO_LIMIT = 700.0  # beyond this exp() would overflow float64


class SamplerError(RuntimeError):
    """Non-finite state encountered while stepping the sampler."""


@dataclass
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray        # [T], betas[i] is beta at step t = i + 1
    alpha_bars: np.ndarray   # [T], cumulative product of (1 - beta)

    def alpha_bar(self, t: float) -> float:
        """abar at integer or fractional t in [0, T]; abar(0) = 1.
        Fractional values interpolate log abar linearly between grid steps."""
        if t < 0 or t > self.T:
            raise ArgumentError(f"alpha_bar: t={t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        log_bars = np.log(self.alpha_bars)
        lo = int(np.floor(t))
        frac = t - lo
        if frac == 0.0:
            return float(self.alpha_bars[lo - 1])
        lo_log = 0.0 if lo == 0 else log_bars[lo - 1]
        hi_log = log_bars[min(lo, self.T - 1)]
        return float(np.exp(lo_log + frac * (hi_log - lo_log)))

    def beta(self, t: float) -> float:
        """beta at (possibly fractional) t, linearly interpolated; clamped to
        the first grid value below t = 1."""
        if t < 0 or t > self.T:
            raise ArgumentError(f"beta: t={t} outside [0, {self.T}]")
        if t <= 1.0:
            return float(self.betas[0])
        lo = int(np.floor(t))
        frac = t - lo
        if frac == 0.0 or lo >= self.T:
            return float(self.betas[min(lo, self.T) - 1])
        return float((1 - frac) * self.betas[lo - 1] + frac * self.betas[lo])


def build_schedule(kind: str = "linear", T: int = 1000,
                   beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise ArgumentError(f"build_schedule: unknown schedule kind '{kind}'")
    if T < 1:
        raise ArgumentError(f"build_schedule: T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ArgumentError(
            f"build_schedule: need 0 < beta_start <= beta_end < 1, got "
            f"{beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(kind=kind, T=T, beta_start=beta_start, beta_end=beta_end,
                         betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(z0: LatentSequence, t: float, eps: np.ndarray,
                    sched: NoiseSchedule) -> LatentSequence:
    """One-shot jump to noise level t.  eps must match the vector shape; the
    caller owns its sampling so trajectories can be replayed."""
    eps = np.asarray(eps)
    if eps.shape != z0.vectors.shape:
        raise ArgumentError(
            f"forward_diffuse: eps shape {eps.shape} != vectors shape "
            f"{z0.vectors.shape}")
    abar = sched.alpha_bar(t)
    zt = np.sqrt(abar) * z0.vectors + np.sqrt(1.0 - abar) * eps
    return z0.with_vectors(zt.astype(z0.vectors.dtype, copy=False), t=t)


# ---------------------------------------------------------------------------
# score ratios

def log_true_score_ratio(z_t: np.ndarray, z0: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    """Per-item log ratio; items are the last axis (summed over dimensions).

    Accepts [..., d] arrays and returns [...]-shaped logs.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z_t.shape != np.broadcast_shapes(z_t.shape, z0.shape):
        raise ArgumentError(
            f"log_true_score_ratio: shapes {z_t.shape} and {z0.shape} do not broadcast")
    if not (0.0 < alpha_bar_t < 1.0):
        raise ArgumentError(
            f"log_true_score_ratio: alpha_bar_t must lie in (0, 1), got {alpha_bar_t}")
    resid = z_t - np.sqrt(alpha_bar_t) * z0
    return (np.sum(z_t**2, axis=-1) / 2.0
            - np.sum(resid**2, axis=-1) / (2.0 * (1.0 - alpha_bar_t)))


def true_score_ratio(z_t: np.ndarray, z0: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    log_r = log_true_score_ratio(z_t, z0, alpha_bar_t)
    mx = float(np.max(log_r)) if np.asarray(log_r).size else 0.0
    if mx > _LOG_RATIO_LIMIT:
        raise NumericsError(
            f"true_score_ratio: log-ratio {mx} overflows float64; work in log space")
    return np.exp(log_r)


def parameterized_score(f_values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax over the candidate axis: the model's predicted ratios.

    Rows sum to one by construction; equal f-values give the uniform row and
    adding a constant to a row changes nothing.
    """
    f_values = np.asarray(f_values, dtype=np.float64)
    if f_values.shape[axis] == 0:
        raise ArgumentError("parameterized_score: empty candidate axis")
    if not np.all(np.isfinite(f_values)):
        raise NumericsError("parameterized_score: non-finite f-values")
    mx = np.max(f_values, axis=axis, keepdims=True)
    e = np.exp(f_values - mx)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# score entropy

def _k_term(r: np.ndarray) -> np.ndarray:
    """K(a) = a (log a - 1), continuously extended with K(0) = 0."""
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] * (np.log(r[pos]) - 1.0)
    return out


def _validate_score_terms(s: np.ndarray, r: np.ndarray, omega: Optional[np.ndarray]):
    s = np.asarray(s, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if s.shape != r.shape:
        raise ArgumentError(f"score_entropy: s shape {s.shape} != r shape {r.shape}")
    if np.any(s <= 0):
        raise ArgumentError("score_entropy: all predicted ratios s must be > 0")
    if np.any(r < 0):
        raise ArgumentError("score_entropy: true ratios r must be >= 0")
    if omega is None:
        omega = np.ones_like(s)
    else:
        omega = np.asarray(omega, dtype=np.float64)
        if omega.shape != s.shape:
            raise ArgumentError(
                f"score_entropy: omega shape {omega.shape} != s shape {s.shape}")
        if np.any(omega <= 0) or np.any(omega > 1):
            raise ArgumentError("score_entropy: weights must lie in (0, 1]")
    return s, r, omega


def score_entropy_terms(s: np.ndarray, r: np.ndarray,
                        omega: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-candidate loss terms omega (s - r log s + K(r)); each is >= 0 and
    vanishes exactly at s = r."""
    s, r, omega = _validate_score_terms(s, r, omega)
    return omega * (s - r * np.log(s) + _k_term(r))


def score_entropy(s: np.ndarray, r: np.ndarray,
                  omega: Optional[np.ndarray] = None) -> float:
    return float(np.sum(score_entropy_terms(s, r, omega)))


def score_entropy_grad(s: np.ndarray, r: np.ndarray,
                       omega: Optional[np.ndarray] = None) -> np.ndarray:
    """d se / d s = omega (1 - r / s), the analytic gradient."""
    s, r, omega = _validate_score_terms(s, r, omega)
    return omega * (1.0 - r / s)


# ---------------------------------------------------------------------------
# sampler step

def dpm_solver_step(f: Callable[[LatentSequence, float], np.ndarray],
                    z_t: LatentSequence, t: float, dt: float, *,
                    step_index: Optional[int] = None) -> LatentSequence:
    """One explicit second-order step from t to t - dt.

    f(seq, t) must return a drift array of the same shape as seq.vectors.
    Non-finite drifts or states abort with the step identified.
    """
    if dt <= 0:
        raise ArgumentError(f"dpm_solver_step: dt must be > 0, got {dt}")
    tag = f" (step {step_index})" if step_index is not None else ""
    v = z_t.vectors
    d1 = np.asarray(f(z_t, t))
    if d1.shape != v.shape:
        raise ArgumentError(
            f"dpm_solver_step: drift shape {d1.shape} != state shape {v.shape}")
    if not np.all(np.isfinite(d1)):
        raise SamplerError(f"non-finite drift at t={t}{tag}")
    z_mid = z_t.with_vectors((v - dt * d1).astype(v.dtype, copy=False), t=t - dt)
    d2 = np.asarray(f(z_mid, t - dt))
    if not np.all(np.isfinite(d2)):
        raise SamplerError(f"non-finite drift at predictor state, t={t - dt}{tag}")
    new_v = v - (dt / 2.0) * (d1 + d2)
    if not np.all(np.isfinite(new_v)):
        raise SamplerError(f"non-finite state after update at t={t - dt}{tag}")
    return z_t.with_vectors(new_v.astype(v.dtype, copy=False), t=t - dt)
