"""Rectified noise schedule, per-frame forward noising and the DDIM ``tau`` coefficient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, FieldSequence, NoiseLevels


@dataclass(frozen=True)
class ScheduleParams:
    alpha_min: float = 0.001
    beta_min: float = 0.001

    def __post_init__(self):
        if not 0 < self.alpha_min < 1 or not 0 < self.beta_min < 1:
            raise ValueError("alpha_min and beta_min must lie in (0, 1)")


DEFAULT_SCHEDULE = ScheduleParams()


def _check_k(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if np.any(~np.isfinite(k)) or np.any(k < 0.0) or np.any(k > 1.0):
        raise ValueError(f"noise level outside [0, 1]: {k}")
    return k


def alpha(k, p: ScheduleParams = DEFAULT_SCHEDULE):
    """Signal coefficient ``k * alpha_min + (1 - k)``; decreasing in ``k``."""
    k = _check_k(k)
    out = k * p.alpha_min + (1.0 - k)
    return float(out) if out.ndim == 0 else out


def beta(k, p: ScheduleParams = DEFAULT_SCHEDULE):
    """Noise coefficient ``k + (1 - k) * beta_min``; increasing in ``k``."""
    k = _check_k(k)
    out = k + (1.0 - k) * p.beta_min
    return float(out) if out.ndim == 0 else out


def tau(k, k_prime, p: ScheduleParams = DEFAULT_SCHEDULE):
    """Fraction of the remaining noise that a stochastic DDIM step resamples.

    Requires ``k_prime <= k``; ``tau(k, k) == 0``.
    """
    k = _check_k(k)
    kp = _check_k(k_prime)
    if np.any(kp > k):
        raise ValueError("tau requires k_prime <= k")
    a, b = alpha(k, p), beta(k, p)
    ap, bp = alpha(kp, p), beta(kp, p)
    out = 1.0 - (a * a * bp * bp) / (ap * ap * b * b)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def frame_coeffs(k, ndim: int, p: ScheduleParams = DEFAULT_SCHEDULE) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ``alpha``/``beta`` reshaped to broadcast over an ``ndim`` array whose axis 0 is time."""
    k = np.atleast_1d(_check_k(k))
    shape = (k.size,) + (1,) * (ndim - 1)
    return np.reshape(alpha(k, p), shape), np.reshape(beta(k, p), shape)


def noise_sequence(x, k, eps, p: ScheduleParams = DEFAULT_SCHEDULE):
    """Forward process ``z^t = alpha(k^t) x^t + beta(k^t) eps^t`` frame by frame.

    Accepts raw arrays (frame axis first) or a :class:`FieldSequence` for ``x``.
    """
    seq = x if isinstance(x, FieldSequence) else None
    xv = seq.values if seq is not None else np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if eps.shape != xv.shape:
        raise DataError(f"noise shape {eps.shape} does not match data {xv.shape}", "shape")
    if k.ndim != 1 or k.size != xv.shape[0]:
        raise DataError(f"need one noise level per frame ({xv.shape[0]}), got {k.shape}", "k")
    a, b = frame_coeffs(k, xv.ndim, p)
    z = a * xv + b * eps
    return seq.with_values(z) if seq is not None else z


def sample_noise_levels(T: int, rng: np.random.Generator) -> NoiseLevels:
    if T < 1:
        raise ValueError("T must be >= 1")
    return NoiseLevels(rng.uniform(0.0, 1.0, size=T))


def k_grid(n_steps: int) -> np.ndarray:
    """Uniform descending grid ``1 -> 0`` with ``n_steps + 1`` points."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return np.linspace(1.0, 0.0, n_steps + 1)
