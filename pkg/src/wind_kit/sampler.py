"""DDIM reverse sampling with per-frame noise levels, context pinning and rollouts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import DataError, NumericalError
from .schedule import DEFAULT_SCHEDULE, ScheduleParams, alpha, beta, k_grid, tau


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 15
    eta: float = 0.0
    pin_frames: tuple[int, ...] = ()
    k_schedule_mode: str = "uniform_shared"
    k_schedule: tuple | None = None  # (n_steps + 1) x T levels for per_frame_custom

    def __post_init__(self):
        object.__setattr__(self, "pin_frames", tuple(sorted(set(int(i) for i in self.pin_frames))))
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.k_schedule_mode not in ("uniform_shared", "per_frame_custom"):
            raise ValueError(f"unknown k_schedule_mode {self.k_schedule_mode!r}")
        if self.k_schedule_mode == "per_frame_custom" and self.k_schedule is None:
            raise ValueError("per_frame_custom needs an explicit k_schedule")

    def levels(self, n_frames: int) -> np.ndarray:
        """Noise levels per step and frame, ``(n_steps + 1) x T``; pinned frames stay at 0."""
        if self.k_schedule_mode == "uniform_shared":
            K = np.repeat(k_grid(self.n_steps)[:, None], n_frames, axis=1)
        else:
            K = np.array(self.k_schedule, dtype=np.float64)
            if K.shape != (self.n_steps + 1, n_frames):
                raise DataError(f"k_schedule must be {(self.n_steps + 1, n_frames)}, got {K.shape}", "k_schedule")
            if np.any(np.diff(K, axis=0) > 0):
                raise DataError("custom noise levels must be non-increasing per frame", "k_schedule")
        for t in self.pin_frames:
            if not 0 <= t < n_frames:
                raise DataError(f"pinned frame {t} outside window of {n_frames}", "pin_frames")
            K[:, t] = 0.0
        return K


def _per_frame(values, n_frames: int, ndim: int, time_axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[time_axis] = n_frames
    return np.reshape(values, shape)


def ddim_step(
    z,
    x_hat,
    k,
    k_prime,
    eta: float,
    rng: np.random.Generator | None = None,
    p: ScheduleParams = DEFAULT_SCHEDULE,
    pinned=(),
    time_axis: int = 0,
) -> np.ndarray:
    """One DDIM transition from levels ``k`` to ``k_prime`` (per frame).

    Frames that are pinned or have ``k_prime == k`` are returned unchanged.
    """
    z = np.asarray(z, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if z.shape != x_hat.shape:
        raise DataError("z and x_hat must share a shape", "shape")
    T = z.shape[time_axis]
    k = np.broadcast_to(np.asarray(k, dtype=np.float64), (T,))
    kp = np.broadcast_to(np.asarray(k_prime, dtype=np.float64), (T,))
    frozen = np.zeros(T, dtype=bool)
    frozen[list(pinned)] = True
    if np.any((kp > k) & ~frozen):
        raise ValueError(f"ddim_step needs k_prime <= k on advanced frames (k={k}, k_prime={kp})")
    move = (kp < k) & ~frozen
    if not np.any(move):
        return z.copy()
    ks = np.where(move, k, 1.0)
    kps = np.where(move, kp, 0.0)
    a, b = alpha(ks, p), beta(ks, p)
    ap, bp = alpha(kps, p), beta(kps, p)
    t = tau(ks, kps, p)
    nd = z.ndim
    c_x = _per_frame(ap, T, nd, time_axis)
    c_r = _per_frame(bp * np.sqrt(1.0 - eta * t) / b, T, nd, time_axis)
    a_ = _per_frame(a, T, nd, time_axis)
    out = c_x * x_hat + c_r * (z - a_ * x_hat)
    if eta > 0:
        if rng is None:
            raise ValueError("a stochastic step (eta > 0) needs an rng")
        c_e = _per_frame(bp * np.sqrt(eta * t), T, nd, time_axis)
        out = out + c_e * rng.standard_normal(z.shape)
    mask = _per_frame(move, T, nd, time_axis)
    return np.where(mask, out, z)


Hook = Callable[..., np.ndarray]


def sample(
    denoiser,
    cfg: SamplerConfig,
    z_init,
    rng: np.random.Generator | None = None,
    guide: Hook | None = None,
    p: ScheduleParams = DEFAULT_SCHEDULE,
    batched: bool = False,
) -> np.ndarray:
    """Denoise ``z_init`` from ``k = 1`` to ``k = 0``.

    ``z_init`` holds standard normal noise on free frames and clean data on
    the pinned ones.  With ``batched`` the leading axis indexes independent
    trajectories (ensemble members) and the frame axis is 1.  ``guide``, when
    given, is called as ``guide(denoiser, z, k, step)`` and returns the
    corrected clean-state estimate.
    """
    z = np.array(z_init, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(z)):
        raise DataError("initial state is not finite", "z_init")
    taxis = 1 if batched else 0
    T = z.shape[taxis]
    K = cfg.levels(T)
    pinned = list(cfg.pin_frames)
    clean = np.take(z, pinned, axis=taxis).copy() if pinned else None
    for step in range(cfg.n_steps):
        k, kp = K[step], K[step + 1]
        if batched:
            if guide is None:
                x_hat = denoiser.denoise(z, k)
            else:
                x_hat = np.stack([guide(denoiser, zm, k, step) for zm in z])
        else:
            x_hat = denoiser.denoise(z, k) if guide is None else guide(denoiser, z, k, step)
        z = ddim_step(z, x_hat, k, kp, cfg.eta, rng, p, pinned, taxis)
        if pinned:
            if batched:
                z[:, pinned] = clean
            else:
                z[pinned] = clean
        if not np.all(np.isfinite(z)):
            bad = np.unique(np.nonzero(~np.isfinite(z))[taxis]).tolist()
            raise NumericalError(f"non-finite state after sampler step {step + 1}/{cfg.n_steps} in frames {bad}")
    return z


def initial_state(context, window_shape, rng: np.random.Generator, members: int | None = None) -> np.ndarray:
    """Standard normal window(s) with the first ``len(context)`` frames set to ``context``."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == len(window_shape) - 1:
        context = context[None]
    if context.shape[1:] != tuple(window_shape[1:]) or context.shape[0] >= window_shape[0]:
        raise DataError(f"context {context.shape} does not fit window {tuple(window_shape)}", "context")
    shape = tuple(window_shape) if members is None else (members,) + tuple(window_shape)
    z = rng.standard_normal(shape)
    c = context.shape[0]
    if members is None:
        z[:c] = context
    else:
        z[:, :c] = context
    return z


def forecast(
    denoiser,
    cfg: SamplerConfig,
    context,
    rng: np.random.Generator,
    window_shape=None,
    guide: Hook | None = None,
    members: int | None = None,
    p: ScheduleParams = DEFAULT_SCHEDULE,
) -> np.ndarray:
    """Pin the context frames and denoise the rest with a shared schedule."""
    window_shape = window_shape or denoiser.window_shape
    context = np.asarray(context, dtype=np.float64)
    c = 1 if context.ndim == len(window_shape) - 1 else context.shape[0]
    z = initial_state(context, window_shape, rng, members)
    run_cfg = SamplerConfig(cfg.n_steps, cfg.eta, tuple(range(c)), "uniform_shared")
    return sample(denoiser, run_cfg, z, rng, guide, p, batched=members is not None)


def rollout(
    denoiser,
    cfg: SamplerConfig,
    initial_frame,
    n_windows: int,
    rng: np.random.Generator,
    start_hour: float | None = None,
    guide_factory: Callable[[int, object], Hook | None] | None = None,
    p: ScheduleParams = DEFAULT_SCHEDULE,
) -> np.ndarray:
    """Autoregressive windows: each window's last frame pins the next window's first.

    Returns ``1 + (T - 1) * n_windows`` frames.  ``guide_factory(i, denoiser_i)``
    may supply a guidance hook per window.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    window_shape = denoiser.window_shape
    T = window_shape[0]
    frames = [np.asarray(initial_frame, dtype=np.float64)[None]]
    context = frames[0][0]
    hour = start_hour
    for i in range(n_windows):
        den = denoiser
        if hour is not None and hasattr(denoiser, "with_time"):
            den = denoiser.with_time(hour)
        guide = guide_factory(i, den) if guide_factory is not None else None
        out = forecast(den, cfg, context, rng, window_shape, guide, None, p)
        frames.append(out[1:])
        context = out[-1]
        if hour is not None:
            hour += (T - 1) * getattr(denoiser, "stride_hours", 6.0)
    return np.concatenate(frames, axis=0)
