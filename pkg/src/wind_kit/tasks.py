"""Task drivers: forecasting, downscaling, reconstruction, DAM-constrained
rollouts and storyline counterfactuals.

Everything here works on normalized ``T x C x H x W`` windows; callers
denormalize for output.  Each ensemble member draws from its own labelled
random stream so results do not depend on how many members are requested.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import ChannelSpec, DataError, GridSpec, SeedPolicy, area_weights, channel_indices
from .datagen import DAM_LEVEL_FACTORS, DAM_LEVELS, NormStats, denormalize_array, normalize_array
from .guidance import Guide, GuidanceConfig
from .operators import (
    DAMOperator,
    ForwardOperator,
    avgpool_spatial,
    channel_spatial_mean,
    sparse_mask,
    stack,
    temporal_mean,
)
from .sampler import SamplerConfig, forecast, rollout, sample

STORYLINE_SAMPLER = SamplerConfig(n_steps=10, eta=1.0)
STORYLINE_GUIDANCE = GuidanceConfig(delta_sq=1e-3, cg_iters=10)


def _bind(denoiser, start_hour):
    if start_hour is not None and hasattr(denoiser, "with_time"):
        return denoiser.with_time(start_hour)
    return denoiser


def forecast_ensemble(denoiser, context, members: int, cfg: SamplerConfig, seeds: SeedPolicy, start_hour=None, label="forecast"):
    """``members x T x C x H x W`` forecasts pinned to ``context`` (frame 0)."""
    den = _bind(denoiser, start_hour)
    out = [forecast(den, cfg, context, seeds.rng(label, m)) for m in range(members)]
    return np.stack(out)


def guided_ensemble(
    denoiser,
    operator: ForwardOperator,
    y,
    members: int,
    cfg: SamplerConfig,
    guidance: GuidanceConfig,
    seeds: SeedPolicy,
    start_hour=None,
    context=None,
    label="guided",
):
    """Posterior samples given observations ``y = operator(X)``.

    Without ``context`` all frames start from noise; otherwise the context
    frames are pinned as in forecasting.
    """
    den = _bind(denoiser, start_hour)
    guide = Guide(operator, y, guidance)
    shape = den.window_shape
    out = []
    for m in range(members):
        rng = seeds.rng(label, m)
        if context is None:
            z = rng.standard_normal(shape)
            out.append(sample(den, replace(cfg, pin_frames=()), z, rng, guide))
        else:
            out.append(forecast(den, cfg, context, rng, shape, guide))
    return np.stack(out)


def spatial_downscale(denoiser, coarse, factor: int, members, cfg, guidance, seeds, start_hour=None):
    return guided_ensemble(denoiser, avgpool_spatial(factor), coarse, members, cfg, guidance, seeds, start_hour, label="downscale-spatial")


def temporal_downscale(denoiser, mean_field, t_agg: int, members, cfg, guidance, seeds, start_hour=None):
    return guided_ensemble(denoiser, temporal_mean(t_agg), mean_field, members, cfg, guidance, seeds, start_hour, label="downscale-temporal")


def reconstruct(denoiser, mask, observations, members, cfg, guidance, seeds, start_hour=None):
    return guided_ensemble(denoiser, sparse_mask(mask), observations, members, cfg, guidance, seeds, start_hour, label="reconstruct")


def pearson(a, b) -> float:
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


# ------------------------------------------------------------------ dry air mass


def dam_operator(channels, stats: NormStats, phi_sfc, grid: GridSpec) -> DAMOperator:
    """Global dry air mass per frame of a normalized state with the default channel set."""

    def find(kind):
        idx = channel_indices(channels, kind)
        if not idx:
            raise DataError(f"dry air mass needs a {kind} channel", "channels")
        return idx[0]

    mean, std = stats.arrays()
    return DAMOperator(
        phi_sfc=phi_sfc,
        area=area_weights(grid),
        mslp_channel=find("pressure"),
        t2m_channel=find("temperature"),
        q_channel=find("humidity"),
        levels=DAM_LEVELS,
        level_factors=DAM_LEVEL_FACTORS,
        mean=mean,
        std=std,
    )


@dataclass(frozen=True)
class DamSettings:
    rel_scale: float = 1e-4  # relative DAM deviation mapped to one residual unit
    delta_sq: float = 0.0015
    cg_iters: int = 2


def dam_rollout(
    denoiser,
    initial_frame,
    n_windows: int,
    op: DAMOperator,
    cfg: SamplerConfig,
    seeds: SeedPolicy,
    target: float | None = None,
    guided: bool = True,
    settings: DamSettings = DamSettings(),
    start_hour=None,
):
    """Rollout with (or without) guidance toward a constant global dry air mass.

    ``target=None`` uses the dry air mass of ``initial_frame``.  The residual
    is scaled by ``1 / (target * rel_scale)`` so ``delta_sq`` is measured in
    units of ``rel_scale`` relative deviation; the pinned context frame gets
    weight zero.  Returns ``(frames, dam_per_frame, target)``.
    """
    initial_frame = np.asarray(initial_frame, dtype=np.float64)
    c_dam = float(op.apply(initial_frame[None])[0]) if target is None else float(target)
    factory = None
    if guided:
        T = denoiser.window_shape[0]
        w = np.full(T, 1.0 / (abs(c_dam) * settings.rel_scale))
        w[0] = 0.0
        gcfg = GuidanceConfig(cg_iters=settings.cg_iters, delta_sq=settings.delta_sq, residual_weights=tuple(w))
        y = np.full(T, c_dam)

        def factory(i, den):
            return Guide(op, y, gcfg)

    frames = rollout(denoiser, cfg, initial_frame, n_windows, seeds.rng("dam", int(guided)), start_hour, factory)
    return frames, op.apply(frames), c_dam


# ------------------------------------------------------------------ storyline


def perturb_state(frame, channels, stats: NormStats, delta_t: float = 2.0, q_scale: float = 1.07**2):
    """Warm the temperature channels by ``delta_t`` and scale humidity by ``q_scale`` (physical units)."""
    frame = np.asarray(frame, dtype=np.float64)
    phys = denormalize_array(frame[None], channels, stats)[0]
    for i in channel_indices(channels, "temperature"):
        phys[i] += delta_t
    for i in channel_indices(channels, "humidity"):
        phys[i] *= q_scale
    return normalize_array(phys[None], channels, stats)[0]


def _spatial_mean(ens, idx):
    return ens[..., idx, :, :].mean(axis=(-2, -1))


@dataclass
class StorylineResult:
    control: np.ndarray
    warm_free: np.ndarray
    warm_guided: np.ndarray
    targets: np.ndarray  # T x len(channels) target spatial means (normalized)
    channels: tuple[int, ...]
    temperature_channel: int

    def anomaly(self, ens) -> np.ndarray:
        """Ensemble-mean spatial-mean temperature anomaly vs control, per frame (normalized)."""
        i = self.temperature_channel
        return _spatial_mean(ens.mean(axis=0), i) - _spatial_mean(self.control.mean(axis=0), i)

    def guided_error(self) -> np.ndarray:
        """``|spatial mean - target|`` per member, frame and constrained channel."""
        return np.abs(_spatial_mean(self.warm_guided, list(self.channels)) - self.targets[None])


def storyline(
    denoiser,
    initial_frame,
    channels: tuple[ChannelSpec, ...],
    stats: NormStats,
    members: int,
    seeds: SeedPolicy,
    delta_t: float = 2.0,
    q_scale: float = 1.07**2,
    cfg: SamplerConfig = STORYLINE_SAMPLER,
    guidance: GuidanceConfig = STORYLINE_GUIDANCE,
    constrain_humidity: bool = True,
    start_hour=None,
) -> StorylineResult:
    """Control, warm-free and warm-guided ensembles from one initial state.

    The guided run constrains the per-frame spatial means of the temperature
    (and optionally humidity) channels to the control ensemble's means shifted
    by the perturbation.  Residuals are weighted by the inverse perturbation
    size in normalized units.
    """
    t_idx = channel_indices(channels, "temperature")
    q_idx = channel_indices(channels, "humidity") if constrain_humidity else []
    if not t_idx:
        raise DataError("storyline needs a temperature channel", "channels")
    warm = perturb_state(initial_frame, channels, stats, delta_t, q_scale)
    control = forecast_ensemble(denoiser, initial_frame, members, cfg, seeds, start_hour, "storyline-control")
    warm_free = forecast_ensemble(denoiser, warm, members, cfg, seeds, start_hour, "storyline-warm-free")

    # targets: control mean shifted in physical space, mapped back to normalized means
    ctrl_mean = control.mean(axis=0)
    ctrl_phys = denormalize_array(ctrl_mean, channels, stats)
    shifted = ctrl_phys.copy()
    for i in t_idx:
        shifted[:, i] += delta_t
    for i in q_idx:
        shifted[:, i] *= q_scale
    shifted = normalize_array(shifted, channels, stats)
    cons = t_idx + q_idx
    targets = shifted[:, cons].mean(axis=(-2, -1))
    shift = np.abs(targets - ctrl_mean[:, cons].mean(axis=(-2, -1))).mean(axis=0)
    weights = 1.0 / np.maximum(shift, 1e-6)
    ops = [channel_spatial_mean([c], per_frame=True) for c in cons]
    op = stack(ops, weights)
    y = np.concatenate([w * targets[:, j] for j, w in enumerate(weights)])
    # context frame 0 is pinned, so its residual carries no weight
    T = control.shape[1]
    rw = np.ones((len(cons), T))
    rw[:, 0] = 0.0
    gcfg = replace(guidance, residual_weights=tuple(rw.ravel()))
    den = _bind(denoiser, start_hour)
    warm_guided = guided_ensemble(den, op, y, members, cfg, gcfg, seeds, None, warm, "storyline-warm-guided")
    return StorylineResult(control, warm_free, warm_guided, targets, tuple(cons), t_idx[0])
