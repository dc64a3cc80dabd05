"""Likelihood scores for posterior sampling.

For observations ``Y = A(x) + noise`` the likelihood given a noisy state is
approximated as ``N(A(X_hat), G Cov(x|z) G^T + delta^2 I)`` where ``G`` is the
operator Jacobian at ``X_hat`` and ``Cov(x|z) = (dX_hat/dz) diag(beta^2/alpha)``
(Tweedie).  ``mmps`` solves the resulting system with a few matrix-free
conjugate-gradient iterations; ``dps`` keeps only ``delta^2 I``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ConfigError, DataError, NumericalError
from .denoiser.base import Linearization
from .operators import ForwardOperator
from .schedule import DEFAULT_SCHEDULE, ScheduleParams, frame_coeffs


def cg_solve(matvec: Callable[[np.ndarray], np.ndarray], rhs, iters: int, tol: float = 1e-10) -> np.ndarray:
    """Conjugate gradients from a zero initial guess.

    Stops after ``iters`` iterations or once ``|r| <= tol * |rhs|``.  A
    non-positive curvature ``p^T M p`` ends the iteration early (the system is
    not positive definite along that direction).
    """
    if iters < 1:
        raise ValueError("cg_solve needs at least one iteration")
    b = np.asarray(rhs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(b)):
        raise NumericalError("conjugate gradients: right-hand side is not finite")
    x = np.zeros_like(b)
    r = b.copy()
    rs = float(r @ r)
    b_norm = np.sqrt(rs)
    if b_norm == 0.0:
        return x
    d = r.copy()
    for i in range(1, iters + 1):
        Md = np.asarray(matvec(d), dtype=np.float64).ravel()
        curv = float(d @ Md)
        if not np.isfinite(curv):
            raise NumericalError(f"conjugate gradients: non-finite matvec at iteration {i}")
        if curv <= 0.0:
            break
        step = rs / curv
        x = x + step * d
        r = r - step * Md
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
            raise NumericalError(f"conjugate gradients: non-finite iterate at iteration {i}")
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * b_norm:
            break
        d = r + (rs_new / rs) * d
        rs = rs_new
    return x


@dataclass(frozen=True)
class GuidanceConfig:
    method: str = "mmps"
    cg_iters: int = 2
    delta_sq: float | tuple = 0.0015
    residual_weights: float | tuple | None = None
    strength: float = 1.0
    cg_tol: float = 1e-6
    every: int = 1  # apply guidance on every ``every``-th sampler step

    def __post_init__(self):
        if self.method not in ("mmps", "dps"):
            raise ConfigError(f"unknown guidance method {self.method!r} (use 'mmps' or 'dps')")
        if self.cg_iters < 1:
            raise ConfigError("cg_iters must be >= 1")
        if np.any(np.asarray(self.delta_sq, dtype=np.float64) <= 0):
            raise ConfigError("delta_sq must be positive")
        if self.strength < 0 or self.every < 1:
            raise ConfigError("strength must be >= 0 and every >= 1")


def _weights(cfg: GuidanceConfig, out_shape) -> np.ndarray:
    if cfg.residual_weights is None:
        return np.ones(out_shape)
    w = np.asarray(cfg.residual_weights, dtype=np.float64)
    try:
        return np.broadcast_to(w, out_shape)
    except ValueError as exc:
        raise DataError(f"residual weights {w.shape} do not fit observations {out_shape}", "residual_weights") from exc


def _check_operator(operator) -> None:
    for name in ("apply", "jvp", "vjp"):
        if not callable(getattr(operator, name, None)):
            raise ConfigError(f"operator {type(operator).__name__} provides no {name}; guidance needs it")


def score_from_linearization(
    lin: Linearization,
    operator: ForwardOperator,
    k,
    y,
    cfg: GuidanceConfig,
    p: ScheduleParams = DEFAULT_SCHEDULE,
) -> np.ndarray:
    """``grad_z log p(Y | z)`` given a denoiser linearized at ``z``."""
    _check_operator(operator)
    x_hat = lin.x_hat
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(operator.apply(x_hat))
    if pred.shape != y.shape:
        raise DataError(f"observations have shape {y.shape}, operator yields {pred.shape}", "y")
    w = _weights(cfg, y.shape)
    r = w * (y - pred)
    if not np.all(np.isfinite(r)):
        raise NumericalError("guidance residual is not finite")
    delta = np.broadcast_to(np.asarray(cfg.delta_sq, dtype=np.float64), y.shape).ravel()
    if cfg.method == "dps":
        v = r.ravel() / delta
    else:
        a, b = frame_coeffs(k, x_hat.ndim, p)
        post_scale = b * b / a

        def matvec(vec):
            u = operator.vjp(x_hat, w * vec.reshape(y.shape))
            u = lin.jvp(post_scale * u)
            return (w * operator.jvp(x_hat, u)).ravel() + delta * vec

        v = cg_solve(matvec, r.ravel(), cfg.cg_iters, cfg.cg_tol)
    score = lin.vjp(operator.vjp(x_hat, w * v.reshape(y.shape)))
    return cfg.strength * np.asarray(score)


def likelihood_score(denoiser, operator: ForwardOperator, z, k, y, cfg: GuidanceConfig, p: ScheduleParams = DEFAULT_SCHEDULE):
    """Linearize ``denoiser`` at ``z`` and return the approximate likelihood score."""
    return score_from_linearization(denoiser.linearize(z, k), operator, k, y, cfg, p)


def guided_denoised_estimate(x_hat, s_y, k, p: ScheduleParams = DEFAULT_SCHEDULE) -> np.ndarray:
    """``X_hat + (beta^2 / alpha) s_y`` per frame."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    s_y = np.asarray(s_y, dtype=np.float64)
    if x_hat.shape != s_y.shape:
        raise DataError("x_hat and the likelihood score must share a shape", "shape")
    a, b = frame_coeffs(k, x_hat.ndim, p)
    return x_hat + (b * b / a) * s_y


class Guide:
    """Sampler hook returning the observation-corrected clean-state estimate."""

    def __init__(self, operator: ForwardOperator, y, cfg: GuidanceConfig = GuidanceConfig(), p: ScheduleParams = DEFAULT_SCHEDULE):
        _check_operator(operator)
        self.operator = operator
        self.y = np.asarray(y, dtype=np.float64)
        self.cfg = cfg
        self.p = p

    def __call__(self, denoiser, z, k, step: int = 0) -> np.ndarray:
        if step % self.cfg.every:
            return denoiser.denoise(z, k)
        lin = denoiser.linearize(z, k)
        s_y = score_from_linearization(lin, self.operator, k, self.y, self.cfg, self.p)
        return guided_denoised_estimate(lin.x_hat, s_y, k, self.p)
