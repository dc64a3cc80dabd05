"""Forward operators for the downstream tasks, each with apply / JVP / VJP.

Operators act on state arrays shaped ``(T, C, H, W)`` (the matrix operator
accepts any shape).  ``jvp(x, u)`` and ``vjp(x, v)`` are the Jacobian and its
transpose at ``x``; for linear operators they ignore ``x`` except for its shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import DataError
from .physics import PhysicalConstants, VerticalProfile, dry_air_mass_field, dry_air_mass_partials

DEFAULT_DELTA_SQ = 0.0015
STORYLINE_DELTA_SQ = 1e-3


class ForwardOperator:
    linear = False
    delta_sq_default = DEFAULT_DELTA_SQ

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(x)


class LinearOperator(ForwardOperator):
    linear = True

    def adjoint(self, v: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, x, u):
        return self.apply(u)

    def vjp(self, x, v):
        return self.adjoint(np.asarray(v, dtype=np.float64), np.shape(x))


class AvgPool(LinearOperator):
    """Non-overlapping ``s x s`` block means over the last two axes."""

    def __init__(self, factor: int):
        if int(factor) < 1:
            raise ValueError("pooling factor must be >= 1")
        self.factor = int(factor)

    def _check(self, shape):
        s = self.factor
        H, W = shape[-2:]
        if H % s or W % s:
            raise DataError(f"grid {H}x{W} is not divisible by pooling factor {s}", "factor")

    def out_shape(self, in_shape):
        self._check(in_shape)
        return tuple(in_shape[:-2]) + (in_shape[-2] // self.factor, in_shape[-1] // self.factor)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x.shape)
        s = self.factor
        H, W = x.shape[-2:]
        blocks = x.reshape(x.shape[:-2] + (H // s, s, W // s, s))
        return blocks.mean(axis=(-3, -1))

    def adjoint(self, v, in_shape):
        s = self.factor
        up = np.repeat(np.repeat(v, s, axis=-2), s, axis=-1) / (s * s)
        return up.reshape(in_shape)


class TemporalMean(LinearOperator):
    """Mean over the first ``t_agg`` frames; later frames are unconstrained."""

    def __init__(self, t_agg: int):
        if int(t_agg) < 1:
            raise ValueError("t_agg must be >= 1")
        self.t_agg = int(t_agg)

    def _check(self, shape):
        if self.t_agg > shape[0]:
            raise DataError(f"t_agg={self.t_agg} exceeds the window length {shape[0]}", "t_agg")

    def out_shape(self, in_shape):
        self._check(in_shape)
        return tuple(in_shape[1:])

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x.shape)
        return x[: self.t_agg].mean(axis=0)

    def adjoint(self, v, in_shape):
        self._check(in_shape)
        out = np.zeros(in_shape)
        out[: self.t_agg] = np.asarray(v)[None] / self.t_agg
        return out


class SparseMask(LinearOperator):
    """Gathers the entries where a binary mask is set.

    The mask may be ``(H, W)`` (shared by all frames and channels),
    ``(C, H, W)`` or ``(T, C, H, W)``; it broadcasts against the state.
    """

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask)
        if not np.all((mask == 0) | (mask == 1)):
            raise DataError("mask must be binary", "mask")
        mask = mask.astype(bool)
        if not mask.any():
            raise DataError("no observations", "mask")
        self.mask = mask

    def full_mask(self, in_shape):
        try:
            return np.broadcast_to(self.mask, in_shape)
        except ValueError as exc:
            raise DataError(f"mask {self.mask.shape} does not broadcast to {in_shape}", "mask") from exc

    def out_shape(self, in_shape):
        return (int(self.full_mask(in_shape).sum()),)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x[self.full_mask(x.shape)]

    def adjoint(self, v, in_shape):
        out = np.zeros(in_shape)
        out[self.full_mask(in_shape)] = np.ravel(v)
        return out


class ChannelSpatialMean(LinearOperator):
    """Spatial mean of selected channels, per frame or over the whole window.

    With ``area`` given the mean is area weighted (weights with mean one);
    the default is the plain ``1/(HW)`` mean.
    """

    def __init__(self, channels: Sequence[int], per_frame: bool = True, area: np.ndarray | None = None):
        self.channels = [int(c) for c in channels]
        if not self.channels:
            raise DataError("empty channel set", "channels")
        if len(set(self.channels)) != len(self.channels):
            raise DataError("channel indices must be distinct", "channels")
        self.per_frame = bool(per_frame)
        self.area = None if area is None else np.asarray(area, dtype=np.float64)

    def _check(self, shape):
        C = shape[1]
        bad = [c for c in self.channels if not 0 <= c < C]
        if bad:
            raise DataError(f"channel indices {bad} out of range for {C} channels", "channels")

    def out_shape(self, in_shape):
        self._check(in_shape)
        n = len(self.channels)
        return (in_shape[0], n) if self.per_frame else (n,)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x.shape)
        sel = x[:, self.channels]
        if self.area is not None:
            sel = sel * self.area
        m = sel.mean(axis=(-2, -1))
        return m if self.per_frame else m.mean(axis=0)

    def adjoint(self, v, in_shape):
        self._check(in_shape)
        T, C, H, W = in_shape
        v = np.asarray(v, dtype=np.float64)
        if not self.per_frame:
            v = np.broadcast_to(v / T, (T, len(self.channels)))
        w = np.ones((H, W)) if self.area is None else self.area
        out = np.zeros(in_shape)
        out[:, self.channels] = v[:, :, None, None] * w / (H * W)
        return out


class MatrixOperator(LinearOperator):
    """Dense matrix acting on the flattened state."""

    def __init__(self, matrix: np.ndarray, in_shape: tuple[int, ...] | None = None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.in_shape = in_shape

    def out_shape(self, in_shape):
        return (self.matrix.shape[0],)

    def apply(self, x):
        return self.matrix @ np.ravel(x)

    def adjoint(self, v, in_shape):
        return (self.matrix.T @ np.ravel(v)).reshape(in_shape)


class DAMOperator(ForwardOperator):
    """Global dry air mass of every frame of a normalized state.

    The state is denormalized with the per-channel affine ``x * std + mean``
    before the physics is evaluated, and that scaling is chained into the
    derivatives.  Specific humidity on the integration levels is the
    humidity channel times fixed ``level_factors``.
    """

    linear = False

    def __init__(
        self,
        *,
        phi_sfc: np.ndarray,
        area: np.ndarray,
        mslp_channel: int,
        t2m_channel: int,
        q_channel: int,
        levels: Sequence[float],
        level_factors: Sequence[float],
        mean: Sequence[float],
        std: Sequence[float],
        constants: PhysicalConstants = PhysicalConstants(),
    ):
        self.phi_sfc = np.asarray(phi_sfc, dtype=np.float64)
        self.area = np.asarray(area, dtype=np.float64)
        self.ch = (int(mslp_channel), int(t2m_channel), int(q_channel))
        self.levels = np.asarray(levels, dtype=np.float64)
        self.level_factors = np.asarray(level_factors, dtype=np.float64)
        if self.levels.shape != self.level_factors.shape:
            raise DataError("one humidity factor per level required", "level_factors")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.constants = constants

    def _physical(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise DataError("DAM operator expects a (T, C, H, W) state", "shape")
        C = x.shape[1]
        if max(self.ch) >= C:
            raise DataError(f"missing channels: need indices {self.ch}, state has {C}", "channels")
        i_p, i_t, i_q = self.ch
        mslp = x[:, i_p] * self.std[i_p] + self.mean[i_p]
        t2m = x[:, i_t] * self.std[i_t] + self.mean[i_t]
        q = x[:, i_q] * self.std[i_q] + self.mean[i_q]
        profile = VerticalProfile(self.levels, self.level_factors[:, None, None, None] * q[None])
        return mslp, t2m, profile

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def dry_mass(self, x):
        mslp, t2m, profile = self._physical(x)
        return dry_air_mass_field(mslp, self.phi_sfc, t2m, profile, self.constants)

    def apply(self, x):
        return np.sum(self.dry_mass(x) * self.area, axis=(-2, -1))

    def _grad_fields(self, x):
        mslp, t2m, profile = self._physical(x)
        d_p, d_t, d_q = dry_air_mass_partials(mslp, self.phi_sfc, t2m, profile, self.constants)
        d_qchan = np.tensordot(self.level_factors, d_q, axes=(0, 0))
        i_p, i_t, i_q = self.ch
        return (
            d_p * self.std[i_p] * self.area,
            d_t * self.std[i_t] * self.area,
            d_qchan * self.std[i_q] * self.area,
        )

    def jvp(self, x, u):
        u = np.asarray(u, dtype=np.float64)
        g_p, g_t, g_q = self._grad_fields(x)
        i_p, i_t, i_q = self.ch
        return np.sum(g_p * u[:, i_p] + g_t * u[:, i_t] + g_q * u[:, i_q], axis=(-2, -1))

    def vjp(self, x, v):
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64).reshape(x.shape[0], 1, 1)
        g_p, g_t, g_q = self._grad_fields(x)
        out = np.zeros_like(x)
        i_p, i_t, i_q = self.ch
        out[:, i_p] += v * g_p
        out[:, i_t] += v * g_t
        out[:, i_q] += v * g_q
        return out


class Stack(ForwardOperator):
    """Concatenates several operators' flattened outputs, each scaled by a weight."""

    def __init__(self, ops: Sequence[ForwardOperator], weights: Sequence[float] | None = None):
        self.ops = list(ops)
        if not self.ops:
            raise ValueError("stack needs at least one operator")
        self.weights = [1.0] * len(self.ops) if weights is None else [float(w) for w in weights]
        if len(self.weights) != len(self.ops):
            raise ValueError("one weight per operator required")
        self.linear = all(op.linear for op in self.ops)
        self.delta_sq_default = min(op.delta_sq_default for op in self.ops)

    def out_shape(self, in_shape):
        return (sum(int(np.prod(op.out_shape(in_shape))) for op in self.ops),)

    def apply(self, x):
        return np.concatenate([w * np.ravel(op.apply(x)) for op, w in zip(self.ops, self.weights)])

    def jvp(self, x, u):
        return np.concatenate([w * np.ravel(op.jvp(x, u)) for op, w in zip(self.ops, self.weights)])

    def vjp(self, x, v):
        x = np.asarray(x, dtype=np.float64)
        v = np.ravel(v)
        out = np.zeros(x.shape)
        start = 0
        for op, w in zip(self.ops, self.weights):
            shape = op.out_shape(x.shape)
            n = int(np.prod(shape))
            if start + n > v.size:
                raise DataError("cotangent shorter than the stacked output", "shape")
            out += op.vjp(x, w * v[start : start + n].reshape(shape))
            start += n
        if start != v.size:
            raise DataError("cotangent longer than the stacked output", "shape")
        return out


# ---------------------------------------------------------------- constructors


def avgpool_spatial(s: int) -> AvgPool:
    return AvgPool(s)


def temporal_mean(t_agg: int) -> TemporalMean:
    return TemporalMean(t_agg)


def sparse_mask(mask: np.ndarray) -> SparseMask:
    return SparseMask(mask)


def channel_spatial_mean(channels: Sequence[int], per_frame: bool = True, area=None) -> ChannelSpatialMean:
    return ChannelSpatialMean(channels, per_frame, area)


def stack(ops: Sequence[ForwardOperator], weights: Sequence[float] | None = None) -> Stack:
    return Stack(ops, weights)


def random_mask(shape: tuple[int, int], density: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask with exactly ``round(density * H * W)`` observed pixels."""
    H, W = shape
    n = int(round(density * H * W))
    if n < 1:
        raise DataError("no observations", "mask")
    flat = np.zeros(H * W, dtype=bool)
    flat[rng.choice(H * W, size=n, replace=False)] = True
    return flat.reshape(H, W)
