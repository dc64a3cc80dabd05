"""Synthetic toy atmosphere plus the data transforms used before training.

The world is a periodic-in-longitude grid advanced with a few sub-steps per
output frame:

* a zonal jet plus drifting, slowly modulated Rossby-like waves (stream
  function) and a divergent component (velocity potential) give the winds;
* temperature and near-surface humidity are advected semi-Lagrangianly,
  diffused, and relaxed toward a seasonal/diurnal equilibrium;
* precipitation is a rectified power of moisture convergence;
* mean sea level pressure follows the stream function.

Lengths are in grid cells and times in hours inside the integrator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import ChannelSpec, DataError, FieldSequence, GridSpec, SeedPolicy

HOURS_PER_YEAR = 8760.0
G = 9.80665
THERMAL_PA_PER_K = 40.0
PRECIP_LOG_MAX = 6.0  # log10(1000 x + 1) cap when mapping samples back to metres
GEOSTROPHIC_MS_PER_PA = 0.1
# humidity "levels" used by the dry-air-mass integral: the single humidity
# channel is scaled by these factors onto four pressure levels (Pa)
DAM_LEVELS = (50000.0, 70000.0, 85000.0, 100000.0)
DAM_LEVEL_FACTORS = (0.2, 0.45, 0.75, 1.0)

DEFAULT_CHANNELS = (
    ChannelSpec("t2m", "temperature"),
    ChannelSpec("u10", "wind_u"),
    ChannelSpec("v10", "wind_v"),
    ChannelSpec("q", "humidity"),
    ChannelSpec("tp", "precipitation", transform="log_precip"),
    ChannelSpec("msl", "pressure"),
)


@dataclass(frozen=True)
class WorldConfig:
    n_lat: int = 32
    n_lon: int = 64
    advection_speed: float = 0.12  # jet speed at the equator, cells per hour
    wave_amplitude: float = 0.12  # stream-function amplitude, cells^2 per hour
    divergence_amplitude: float = 0.08  # velocity-potential amplitude, cells^2 per hour
    diffusivity: float = 0.04  # cells^2 per hour
    forcing_amplitude: float = 1.0  # scales seasonal, diurnal and meridional forcing
    noise_amplitude: float = 0.3  # K of smooth random forcing per output frame
    relax_hours_t: float = 48.0
    relax_hours_q: float = 36.0
    stride_hours: float = 6.0
    substeps: int = 6
    spinup_days: float = 15.0
    precip_threshold: float = 0.0025  # convergence needed before it rains
    seed: int = 0

    def __post_init__(self):
        if self.diffusivity <= 0:
            raise ValueError("diffusivity must be positive")
        if self.n_lat < 8 or self.n_lon < 8:
            raise ValueError("grid dimensions must be >= 8")
        if self.substeps < 1 or self.stride_hours <= 0:
            raise ValueError("substeps and stride_hours must be positive")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.regular(self.n_lat, self.n_lon)

    def to_json(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ transforms


def precip_transform(x):
    """Metres of precipitation to ``log10(1000 x + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DataError("precipitation must be non-negative", "precipitation")
    return np.log10(1000.0 * x + 1.0)


def precip_inverse(y):
    return (np.power(10.0, np.asarray(y, dtype=np.float64)) - 1.0) / 1000.0


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation (after any channel transform)."""

    mean: tuple[float, ...]
    std: tuple[float, ...]
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.mean) != len(self.std):
            raise DataError("mean/std length mismatch", "stats")
        if any(s <= 0 for s in self.std):
            raise DataError("standard deviation must be positive", "stats")

    @classmethod
    def from_sequence(cls, seq: FieldSequence) -> "NormStats":
        vals = _forward_transform(seq.values, seq.channels)
        return cls(
            tuple(vals.mean(axis=(0, 2, 3))),
            tuple(vals.std(axis=(0, 2, 3))),
            tuple(c.name for c in seq.channels),
        )

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mean), np.asarray(self.std)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        d = json.loads(Path(path).read_text())
        return cls(tuple(d["mean"]), tuple(d["std"]), tuple(d.get("channels", ())))


def _forward_transform(values, channels):
    out = np.array(values, dtype=np.float64, copy=True)
    for i, ch in enumerate(channels):
        if ch.transform == "log_precip":
            out[:, i] = precip_transform(np.clip(out[:, i], 0.0, None))
    return out


def _inverse_transform(values, channels):
    out = np.array(values, dtype=np.float64, copy=True)
    for i, ch in enumerate(channels):
        if ch.transform == "log_precip":
            # generated values may leave the physical range: no negative rain,
            # and the log scale is capped so an untrained model cannot overflow
            out[:, i] = precip_inverse(np.clip(out[:, i], 0.0, PRECIP_LOG_MAX))
    return out


def normalize_array(values, channels, stats: NormStats) -> np.ndarray:
    mean, std = stats.arrays()
    if len(mean) != len(channels):
        raise DataError("statistics do not match the channel count", "stats")
    vals = _forward_transform(values, channels)
    return (vals - mean[:, None, None]) / std[:, None, None]


def denormalize_array(values, channels, stats: NormStats) -> np.ndarray:
    mean, std = stats.arrays()
    if len(mean) != len(channels):
        raise DataError("statistics do not match the channel count", "stats")
    vals = np.asarray(values, dtype=np.float64) * std[:, None, None] + mean[:, None, None]
    return _inverse_transform(vals, channels)


def normalize(seq: FieldSequence, stats: NormStats) -> FieldSequence:
    return seq.with_values(normalize_array(seq.values, seq.channels, stats))


def denormalize(seq: FieldSequence, stats: NormStats) -> FieldSequence:
    return seq.with_values(denormalize_array(seq.values, seq.channels, stats))


def split_sequence(seq: FieldSequence, fractions=(0.7, 0.15, 0.15)) -> tuple[dict, dict]:
    """Disjoint contiguous train/val/test ranges; returns splits and frame boundaries."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to one")
    n = seq.frames
    b1 = int(round(fractions[0] * n))
    b2 = int(round((fractions[0] + fractions[1]) * n))
    bounds = {"train": (0, b1), "val": (b1, b2), "test": (b2, n)}
    splits = {name: seq.window(lo, hi - lo) for name, (lo, hi) in bounds.items()}
    return splits, bounds


# ------------------------------------------------------------------ embeddings


def spatial_embeddings(grid: GridSpec) -> np.ndarray:
    """``(sin lat, cos lat, cos lat sin lon)`` as a ``3 x H x W`` array."""
    lat = np.deg2rad(grid.lat_array())[:, None]
    lon = np.deg2rad(grid.lon_array())[None, :]
    shape = grid.shape
    return np.stack(
        [
            np.broadcast_to(np.sin(lat), shape),
            np.broadcast_to(np.cos(lat), shape),
            np.cos(lat) * np.sin(lon),
        ]
    )


def time_embeddings(grid: GridSpec, hours) -> np.ndarray:
    """Annual and local-time-of-day sine/cosine channels, ``T x 4 x H x W``.

    Local time is UTC plus longitude / 15 degrees per hour.
    """
    hours = np.atleast_1d(np.asarray(hours, dtype=np.float64))
    lon = grid.lon_array()[None, None, :]
    year = 2 * np.pi * (hours / HOURS_PER_YEAR)[:, None, None]
    local = 2 * np.pi * ((hours[:, None, None] + lon / 15.0) % 24.0) / 24.0
    shape = (hours.size,) + grid.shape
    return np.stack(
        [
            np.broadcast_to(np.sin(year), shape),
            np.broadcast_to(np.cos(year), shape),
            np.broadcast_to(np.sin(local), shape),
            np.broadcast_to(np.cos(local), shape),
        ],
        axis=1,
    )


def static_embeddings(grid: GridSpec, hours=None) -> np.ndarray:
    """Coordinate channels; with ``hours`` also the per-frame time channels.

    Without ``hours`` the result is ``3 x H x W``; with ``hours`` of length T it
    is ``T x 7 x H x W`` (spatial channels repeated per frame).
    """
    spatial = spatial_embeddings(grid)
    if hours is None:
        return spatial
    t = time_embeddings(grid, hours)
    return np.concatenate([np.broadcast_to(spatial, (t.shape[0],) + spatial.shape), t], axis=1)


# ------------------------------------------------------------------ generator


def q_sat(t_kelvin, p=1.0e5):
    """Saturation specific humidity (Bolton's vapour pressure formula)."""
    tc = np.asarray(t_kelvin) - 273.15
    e_s = 611.2 * np.exp(17.67 * tc / (tc + 243.5))
    return 0.622 * e_s / (p - 0.378 * e_s)


def orography(cfg: WorldConfig) -> np.ndarray:
    """Surface geopotential (m^2/s^2) from a few smooth Gaussian mountains."""
    rng = SeedPolicy(cfg.seed).rng("orography")
    H, W = cfg.n_lat, cfg.n_lon
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    h = np.zeros((H, W))
    for _ in range(3):
        cj = rng.uniform(0.25 * H, 0.75 * H)
        ci = rng.uniform(0, W)
        r = rng.uniform(0.06, 0.12) * W
        top = rng.uniform(1500.0, 3000.0)
        di = np.minimum(np.abs(ii - ci), W - np.abs(ii - ci))
        h += top * np.exp(-((jj - cj) ** 2 + di**2) / (2 * r * r))
    return G * h


class _World:
    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        grid = cfg.grid
        self.grid = grid
        self.H, self.W = grid.shape
        self.lat = np.deg2rad(grid.lat_array())[:, None]
        self.lon_deg = grid.lon_array()[None, :]
        self.x = 2 * np.pi * np.arange(self.W)[None, :] / self.W
        self.envelope = np.cos(self.lat) ** 2
        rng = SeedPolicy(cfg.seed).rng("world")
        self.waves = [
            dict(
                m=m,
                amp=cfg.wave_amplitude * rng.uniform(0.6, 1.0),
                speed=2 * np.pi * m / self.W * rng.uniform(0.05, 0.12),
                phase=rng.uniform(0, 2 * np.pi),
                mod_period=rng.uniform(150.0, 500.0),
                mod_phase=rng.uniform(0, 2 * np.pi),
            )
            for m in (2, 3, 5)
        ]
        self.div_waves = [
            dict(
                m=m,
                amp=cfg.divergence_amplitude * rng.uniform(0.7, 1.0),
                speed=2 * np.pi * m / self.W * rng.uniform(0.03, 0.08),
                phase=rng.uniform(0, 2 * np.pi),
                lat_mode=lm,
            )
            for m, lm in ((4, 2), (6, 3))
        ]
        self.phi_sfc = orography(cfg)
        self.height = self.phi_sfc / G
        self.noise_rng = SeedPolicy(cfg.seed).rng("world-noise")
        self.cell_m = 2 * np.pi * 6.371e6 / self.W

    # winds in cells/hour ------------------------------------------------------
    def _grad_y(self, f):
        return np.gradient(f, axis=0)

    def _grad_x(self, f):
        return 0.5 * (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1))

    def stream_function(self, t):
        cfg = self.cfg
        # zonal jet u = U0 cos(lat) integrates to psi_jet = -U0 sum cos(lat) dy
        psi = -np.cumsum(cfg.advection_speed * np.cos(self.lat), axis=0) * np.ones((1, self.W))
        psi = psi - psi.mean()
        for w in self.waves:
            amp = w["amp"] * (1 + 0.4 * np.sin(2 * np.pi * t / w["mod_period"] + w["mod_phase"]))
            psi = psi + amp * self.envelope * self.W / (2 * np.pi * w["m"]) * np.sin(
                w["m"] * self.x - w["speed"] * t + w["phase"]
            )
        return psi

    def velocity_potential(self, t):
        chi = np.zeros((self.H, self.W))
        for w in self.div_waves:
            chi = chi + w["amp"] * self.W / (2 * np.pi * w["m"]) * np.cos(self.lat) * np.cos(
                w["lat_mode"] * self.lat
            ) * np.cos(w["m"] * self.x - w["speed"] * t + w["phase"])
        return chi

    def winds(self, t):
        psi = self.stream_function(t)
        chi = self.velocity_potential(t)
        u = -self._grad_y(psi) + self._grad_x(chi)
        v = self._grad_x(psi) + self._grad_y(chi)
        return u, v, psi

    def divergence(self, u, v):
        return self._grad_x(u) + self._grad_y(v)

    # thermodynamics --------------------------------------------------------------
    def t_equilibrium(self, t):
        f = self.cfg.forcing_amplitude
        season = np.cos(2 * np.pi * (t / HOURS_PER_YEAR - 0.55))
        base = 40.0 * (np.cos(self.lat) ** 2 - 2.0 / 3.0) - 10.0 * np.sin(self.lat) * season
        return 288.0 + f * (base - 0.0065 * self.height)

    def diurnal_heating(self, t):
        f = self.cfg.forcing_amplitude
        local = (t + self.lon_deg / 15.0) % 24.0
        shape = np.clip(np.cos(2 * np.pi * (local - 13.0) / 24.0), 0.0, None) - 1.0 / np.pi
        return f * 1.2 * np.cos(self.lat) * shape

    def advect(self, f, u, v, dt):
        jd = np.clip(np.arange(self.H)[:, None] - v * dt, 0.0, self.H - 1.0)
        id_ = (np.arange(self.W)[None, :] - u * dt) % self.W
        j0 = np.floor(jd).astype(int)
        i0 = np.floor(id_).astype(int)
        wj = jd - j0
        wi = id_ - i0
        j1 = np.minimum(j0 + 1, self.H - 1)
        i1 = (i0 + 1) % self.W
        return (
            (1 - wj) * ((1 - wi) * f[j0, i0] + wi * f[j0, i1])
            + wj * ((1 - wi) * f[j1, i0] + wi * f[j1, i1])
        )

    def laplacian(self, f):
        fp = np.pad(f, ((1, 1), (0, 0)), mode="edge")
        return (
            fp[2:] + fp[:-2] - 2 * f + np.roll(f, 1, axis=1) + np.roll(f, -1, axis=1) - 2 * f
        )

    def smooth(self, f, sigma=1.5):
        return gaussian_filter(f, sigma=sigma, mode=("nearest", "wrap"))

    def smooth_noise(self):
        n = self.noise_rng.standard_normal((self.H, self.W))
        n = gaussian_filter(n, sigma=2.5, mode=("nearest", "wrap"))
        return n / (n.std() + 1e-12)


def _step(world: _World, T, q, t, dt):
    cfg = world.cfg
    u, v, _ = world.winds(t)
    T = world.advect(T, u, v, dt)
    q = world.advect(q, u, v, dt)
    T = T + dt * (
        cfg.diffusivity * world.laplacian(T)
        - (T - world.t_equilibrium(t)) / cfg.relax_hours_t
        + world.diurnal_heating(t)
    )
    q_eq = 0.7 * q_sat(T)
    q = q + dt * (cfg.diffusivity * world.laplacian(q) - (q - q_eq) / cfg.relax_hours_q)
    q = np.clip(q, 0.0, None)
    conv = -world.divergence(u, v) * (q / 0.01)
    rate = 0.05 * np.clip(conv - cfg.precip_threshold, 0.0, None) ** 1.5  # m per hour
    return T, q, rate * dt


def generate(cfg: WorldConfig, n_frames: int) -> FieldSequence:
    """Simulate ``n_frames`` output frames (physical units) after a spin-up."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    world = _World(cfg)
    dt = cfg.stride_hours / cfg.substeps
    t = 0.0
    T = world.t_equilibrium(t) + 3.0 * world.smooth_noise()
    q = 0.7 * q_sat(T)
    n_spin = int(round(cfg.spinup_days * 24.0 / dt))
    for _ in range(n_spin):
        T, q, _ = _step(world, T, q, t, dt)
        t += dt
    psi_ref = world.stream_function(t)
    out = np.empty((n_frames, len(DEFAULT_CHANNELS), cfg.n_lat, cfg.n_lon))
    start_hour = t
    to_ms = world.cell_m / 3600.0
    for n in range(n_frames):
        # every frame carries the precipitation accumulated over the preceding stride
        precip = np.zeros_like(T)
        for _ in range(cfg.substeps):
            T, q, p = _step(world, T, q, t, dt)
            precip += p
            t += dt
        if n == 0:
            start_hour = t
        if cfg.noise_amplitude > 0:
            T = T + cfg.noise_amplitude * world.smooth_noise()
            q = np.clip(q * (1 + 0.05 * cfg.noise_amplitude * world.smooth_noise()), 0.0, None)
        u, v, psi = world.winds(t)
        # warm zonal anomalies lower the surface pressure; the surface wind adds
        # the geostrophic response to that thermal pressure field
        p_th = -THERMAL_PA_PER_K * world.smooth(T - T.mean(axis=1, keepdims=True))
        msl = 101325.0 + 900.0 * (psi - psi_ref.mean()) / max(cfg.advection_speed, 1e-6) / world.H + p_th
        u_out = u * to_ms - GEOSTROPHIC_MS_PER_PA * world._grad_y(p_th)
        v_out = v * to_ms + GEOSTROPHIC_MS_PER_PA * world._grad_x(p_th)
        out[n] = np.stack([T, u_out, v_out, q, precip, msl])
    return FieldSequence(cfg.grid, DEFAULT_CHANNELS, out, cfg.stride_hours, start_hour)
