"""Exact posterior-mean denoiser for a Gaussian prior.

Used as a correctness oracle: with ``x ~ N(mu, Sigma)`` and the per-frame
forward process ``z = A x + B eps`` (``A``, ``B`` diagonal), the clean-state
estimate ``E[x | z]`` and its Jacobian are available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..core import DataError
from ..schedule import DEFAULT_SCHEDULE, ScheduleParams, alpha, beta
from .base import DenoiserBase, Linearization


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """``N(mean, cov)``; ``cov`` is a full ``D x D`` matrix or a length-``D`` diagonal."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.asarray(self.cov, dtype=np.float64)
        D = mean.size
        if cov.ndim == 1:
            if cov.size != D or np.any(cov <= 0):
                raise DataError("diagonal covariance must be positive with one entry per dimension", "cov")
        elif cov.shape == (D, D):
            if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise DataError("covariance must be symmetric", "cov")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise DataError("covariance is not positive definite", "cov") from exc
        else:
            raise DataError(f"covariance shape {cov.shape} incompatible with mean of size {D}", "cov")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def diagonal(self) -> bool:
        return self.cov.ndim == 1

    def dense_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.diagonal else self.cov

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = () if n is None else (n,)
        if self.diagonal:
            return self.mean + np.sqrt(self.cov) * rng.standard_normal(size + (self.dim,))
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal(size + (self.dim,)) @ L.T


def _entry_coeffs(k, shape, p):
    """Expand per-frame alpha/beta to one value per entry of a frame-major array."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if k.size != shape[0]:
        raise DataError(f"need one noise level per frame ({shape[0]}), got {k.size}", "k")
    per_frame = int(np.prod(shape[1:], dtype=int))
    return np.repeat(alpha(k, p), per_frame), np.repeat(beta(k, p), per_frame)


class GaussianDenoiser(DenoiserBase):
    """``E[x | z]`` under a Gaussian prior, with exact Jacobian actions."""

    def __init__(self, prior: GaussianPrior, p: ScheduleParams = DEFAULT_SCHEDULE):
        self.prior = prior
        self.p = p

    def _check(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.size != self.prior.dim:
            raise DataError(f"state has {z.size} entries, prior has {self.prior.dim}", "shape")
        return z

    def linearize(self, z, k) -> Linearization:
        z = self._check(z)
        shape = z.shape
        a, b = _entry_coeffs(k, shape, self.p)
        mu = self.prior.mean
        resid = z.ravel() - a * mu
        if self.prior.diagonal:
            s = self.prior.cov
            gain = s * a / (a * a * s + b * b)
            x_hat = mu + gain * resid
            return Linearization(
                x_hat.reshape(shape),
                lambda u: (gain * np.ravel(u)).reshape(shape),
                lambda v: (gain * np.ravel(v)).reshape(shape),
            )
        sigma = self.prior.cov
        S = a[:, None] * sigma * a[None, :] + np.diag(b * b)
        cf = cho_factor(S)
        x_hat = mu + sigma @ (a * cho_solve(cf, resid))

        def jvp(u):
            return (sigma @ (a * cho_solve(cf, np.ravel(u)))).reshape(shape)

        def vjp(v):
            return cho_solve(cf, a * (sigma @ np.ravel(v))).reshape(shape)

        return Linearization(x_hat.reshape(shape), jvp, vjp)

    def denoise(self, z, k):
        return self.linearize(z, k).x_hat

    def jacobian(self, z, k) -> np.ndarray:
        """Dense ``d x_hat / d z`` (rows: outputs)."""
        z = self._check(z)
        lin = self.linearize(z, k)
        eye = np.eye(z.size)
        return np.stack([np.ravel(lin.jvp(e.reshape(z.shape))) for e in eye], axis=1)

    def with_time(self, start_hour, stride_hours=None):
        return self


def analytic_denoise(prior: GaussianPrior, z, k, p: ScheduleParams = DEFAULT_SCHEDULE) -> np.ndarray:
    """Posterior mean ``mu + Sigma A (A Sigma A + B^2)^-1 (z - A mu)``."""
    return GaussianDenoiser(prior, p).denoise(z, k)
