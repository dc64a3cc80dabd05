"""Denoiser contract, the score identity and the training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from ..core import DataError
from ..schedule import DEFAULT_SCHEDULE, ScheduleParams, frame_coeffs


@dataclass(frozen=True)
class Linearization:
    """A denoiser evaluated at one point together with its Jacobian actions."""

    x_hat: np.ndarray
    jvp: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray], np.ndarray]


class Denoiser(Protocol):
    """Clean-state predictor ``X_hat(Z)`` over arrays whose axis 0 indexes frames.

    ``k`` is passed so exact oracles can use it; trained networks ignore it.
    """

    def denoise(self, z: np.ndarray, k) -> np.ndarray: ...

    def jvp(self, z: np.ndarray, k, u: np.ndarray) -> np.ndarray: ...

    def vjp(self, z: np.ndarray, k, v: np.ndarray) -> np.ndarray: ...

    def linearize(self, z: np.ndarray, k) -> Linearization: ...


class DenoiserBase:
    def jvp(self, z, k, u):
        return self.linearize(z, k).jvp(u)

    def vjp(self, z, k, v):
        return self.linearize(z, k).vjp(v)

    def linearize(self, z, k) -> Linearization:
        return Linearization(
            self.denoise(z, k),
            lambda u: self.jvp(z, k, u),
            lambda v: self.vjp(z, k, v),
        )


def score_from_denoiser(z, x_hat, k, p: ScheduleParams = DEFAULT_SCHEDULE) -> np.ndarray:
    """Score implied by a clean-state estimate: ``-(z - alpha x_hat) / beta^2`` per frame.

    Frames at ``k = 0`` get a finite value (``beta >= beta_min``) that carries
    no information; callers should ignore them.
    """
    z = np.asarray(z, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if z.shape != x_hat.shape:
        raise DataError("z and x_hat must share a shape", "shape")
    a, b = frame_coeffs(k, z.ndim, p)
    return -(z - a * x_hat) / (b * b)


def loss(x, x_hat, channel_weights, area) -> float:
    """Channel- and area-weighted squared error, divided by ``T*C*H*W``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DataError("prediction and target shapes differ", "shape")
    w = np.asarray(channel_weights, dtype=np.float64).reshape(-1, 1, 1)
    err = (x - x_hat) ** 2 * w * np.asarray(area)
    return float(err.sum() / x.size)
