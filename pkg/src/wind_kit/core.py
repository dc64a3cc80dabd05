"""Grids, channel metadata, field containers, seeding and the tensor blob format."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHANNEL_KINDS = (
    "temperature",
    "humidity",
    "wind_u",
    "wind_v",
    "pressure",
    "precipitation",
    "geopotential",
    "generic",
)
TRANSFORMS = ("none", "log_precip")
DIMS = ["time", "channel", "lat", "lon"]


class WindKitError(Exception):
    """Base class for engine errors."""


class DataError(WindKitError, ValueError):
    """Malformed or inconsistent data; ``field`` names the offending item."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NumericalError(WindKitError, FloatingPointError):
    """A numerical procedure produced non-finite values or broke down."""


class ConfigError(WindKitError, ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class GridSpec:
    """Regular latitude/longitude grid. Latitudes in degrees, longitudes periodic."""

    lat: tuple[float, ...]
    lon: tuple[float, ...]

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=float)
        lon = np.asarray(self.lon, dtype=float)
        object.__setattr__(self, "lat", tuple(float(v) for v in lat))
        object.__setattr__(self, "lon", tuple(float(v) for v in lon))
        if lat.size < 2 or lon.size < 2:
            raise DataError("grid needs at least 2 rows and 2 columns", "grid")
        dlat = np.diff(lat)
        if not (np.all(dlat > 0) or np.all(dlat < 0)):
            raise DataError("latitudes must be strictly monotone", "lat")
        if np.any(np.abs(lat) > 90.0):
            raise DataError("latitudes must lie in [-90, 90]", "lat")
        dlon = np.diff(lon)
        if not np.allclose(dlon, dlon[0], rtol=0, atol=1e-9) or dlon[0] <= 0:
            raise DataError("longitude spacing must be uniform and increasing", "lon")

    @classmethod
    def regular(cls, n_lat: int, n_lon: int) -> "GridSpec":
        """Cell-centred global grid, south to north, starting at 0 deg longitude."""
        dlat = 180.0 / n_lat
        lat = -90.0 + dlat * (np.arange(n_lat) + 0.5)
        lon = 360.0 / n_lon * np.arange(n_lon)
        return cls(tuple(lat), tuple(lon))

    @property
    def n_lat(self) -> int:
        return len(self.lat)

    @property
    def n_lon(self) -> int:
        return len(self.lon)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    def lat_array(self) -> np.ndarray:
        return np.asarray(self.lat)

    def lon_array(self) -> np.ndarray:
        return np.asarray(self.lon)

    def to_json(self) -> dict:
        return {"lat": list(self.lat), "lon": list(self.lon)}


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str = "generic"
    level: float | None = None
    transform: str = "none"

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise DataError(f"unknown channel kind {self.kind!r}", "channels")
        if self.transform not in TRANSFORMS:
            raise DataError(f"unknown transform {self.transform!r}", "channels")
        if self.kind == "precipitation" and self.transform != "log_precip":
            raise DataError(
                f"precipitation channel {self.name!r} must use log_precip", "channels"
            )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "level": self.level,
            "transform": self.transform,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ChannelSpec":
        return cls(d["name"], d.get("kind", "generic"), d.get("level"), d.get("transform", "none"))


@dataclass(frozen=True, eq=False)
class FieldSequence:
    """A ``T x C x H x W`` block of fields with its grid and channel metadata.

    ``start_hour`` is the valid time of frame 0 in hours since the start of the
    synthetic calendar; frame ``t`` is valid at ``start_hour + t * stride_hours``.
    """

    grid: GridSpec
    channels: tuple[ChannelSpec, ...]
    values: np.ndarray
    stride_hours: float = 6.0
    start_hour: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channels", tuple(self.channels))
        if values.ndim != 4:
            raise DataError(f"values must be 4-D (T,C,H,W), got shape {values.shape}", "shape")
        if values.shape[1] != len(self.channels):
            raise DataError("channel count mismatch", "channels")
        if values.shape[2:] != self.grid.shape:
            raise DataError(
                f"spatial shape {values.shape[2:]} does not match grid {self.grid.shape}", "grid"
            )
        if self.stride_hours <= 0:
            raise DataError("stride_hours must be positive", "stride_hours")
        if not np.all(np.isfinite(values)):
            raise DataError("values must be finite", "values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def hours(self) -> np.ndarray:
        return self.start_hour + self.stride_hours * np.arange(self.frames)

    def channel_index(self, name: str) -> int:
        for i, ch in enumerate(self.channels):
            if ch.name == name:
                return i
        raise DataError(f"no channel named {name!r}", "channels")

    def with_values(self, values: np.ndarray, start_hour: float | None = None) -> "FieldSequence":
        return FieldSequence(
            self.grid,
            self.channels,
            values,
            self.stride_hours,
            self.start_hour if start_hour is None else start_hour,
        )

    def window(self, start: int, length: int) -> "FieldSequence":
        if start < 0 or start + length > self.frames:
            raise DataError(f"window [{start}, {start + length}) outside {self.frames} frames", "frames")
        return self.with_values(
            self.values[start : start + length],
            start_hour=self.start_hour + start * self.stride_hours,
        )

    def same_layout(self, other: "FieldSequence") -> bool:
        return (
            self.grid == other.grid
            and self.channels == other.channels
            and self.shape == other.shape
        )


@dataclass(frozen=True, eq=False)
class NoiseLevels:
    """Per-frame diffusion times, each in ``[0, 1]``."""

    k: np.ndarray

    def __post_init__(self):
        k = np.array(self.k, dtype=np.float64, ndmin=1, copy=True)
        if k.ndim != 1:
            raise DataError("noise levels must be a vector", "k")
        if np.any(~np.isfinite(k)) or np.any(k < 0) or np.any(k > 1):
            raise DataError("noise levels must lie in [0, 1]", "k")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)

    def __array__(self, dtype=None, copy=None):
        return self.k if dtype is None else self.k.astype(dtype)

    def __len__(self) -> int:
        return self.k.size


@dataclass(frozen=True)
class EnsembleSet:
    members: tuple[FieldSequence, ...]

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if len(members) < 1:
            raise DataError("ensemble needs at least one member", "members")
        first = members[0]
        for i, m in enumerate(members[1:], start=1):
            if not first.same_layout(m):
                raise DataError(f"member {i} differs in layout from member 0", "members")

    @property
    def size(self) -> int:
        return len(self.members)

    def stacked(self) -> np.ndarray:
        """Values as an ``M x T x C x H x W`` array."""
        return np.stack([m.values for m in self.members])


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


@dataclass(frozen=True)
class SeedPolicy:
    """Derives independent, reproducible random streams from one master seed.

    Streams are addressed by a consumer label (``"datagen"``, ``"training"``,
    ``"sampling"``, ...) and optional integer indices such as an ensemble
    member number.
    """

    master_seed: int = 0

    def seed_sequence(self, label: str, *index: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=self.master_seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(_label_key(label), *[int(i) for i in index]),
        )

    def rng(self, label: str, *index: int) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(label, *index))

    def int_seed(self, label: str, *index: int) -> int:
        return int(self.seed_sequence(label, *index).generate_state(1, np.uint64)[0] >> 1)


def area_weights(grid: GridSpec) -> np.ndarray:
    """cos(latitude) cell weights, rescaled to have mean exactly one over the grid."""
    coslat = np.clip(np.cos(np.deg2rad(grid.lat_array())), 0.0, None)
    w = np.repeat(coslat[:, None], grid.n_lon, axis=1)
    return w / w.mean()


# --------------------------------------------------------------------------- blobs


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_blob(seq: FieldSequence, path: str | Path, stats_ref: str | None = None, extra: dict | None = None) -> None:
    """Write ``seq`` as raw little-endian float32 (T,C,H,W order) plus a JSON sidecar.

    ``extra`` adds provenance keys (config hash, seed) to the sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(seq.values, dtype="<f4")
    path.write_bytes(payload.tobytes(order="C"))
    meta = {
        "shape": list(seq.shape),
        "dims": DIMS,
        "channels": [c.to_json() for c in seq.channels],
        "lat": list(seq.grid.lat),
        "lon": list(seq.grid.lon),
        "stride_hours": seq.stride_hours,
        "start_hour": seq.start_hour,
        "stats_ref": stats_ref,
    }
    meta.update(extra or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def read_blob_meta(path: str | Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing sidecar {side}", "sidecar")
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"sidecar {side} is not valid JSON: {exc}", "sidecar") from exc


def read_blob(path: str | Path) -> FieldSequence:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing blob {path}", "path")
    meta = read_blob_meta(path)
    for key in ("shape", "channels", "lat", "lon", "stride_hours"):
        if key not in meta:
            raise DataError(f"sidecar lacks key {key!r}", key)
    if meta.get("dims", DIMS) != DIMS:
        raise DataError(f"unsupported dims {meta['dims']}", "dims")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 4:
        raise DataError("shape must have four entries", "shape")
    T, C, H, W = shape
    if len(meta["channels"]) != C:
        raise DataError("channel count mismatch", "channels")
    if len(meta["lat"]) != H:
        raise DataError("lat size mismatch", "lat")
    if len(meta["lon"]) != W:
        raise DataError("lon size mismatch", "lon")
    raw = path.read_bytes()
    if len(raw) == 0:
        raise DataError("truncated blob", "payload")
    frame_bytes = C * H * W * 4
    if len(raw) != T * frame_bytes:
        if frame_bytes and len(raw) % frame_bytes == 0:
            raise DataError(
                f"frame count mismatch: sidecar declares {T}, payload holds {len(raw) // frame_bytes}",
                "frames",
            )
        raise DataError(
            f"truncated blob: expected {T * frame_bytes} bytes, found {len(raw)}", "payload"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    grid = GridSpec(tuple(meta["lat"]), tuple(meta["lon"]))
    channels = tuple(ChannelSpec.from_json(c) for c in meta["channels"])
    return FieldSequence(
        grid,
        channels,
        values,
        float(meta["stride_hours"]),
        float(meta.get("start_hour", 0.0)),
    )


def as_float32_exact(values: np.ndarray) -> np.ndarray:
    """Round values to what survives a float32 blob round trip."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def channel_indices(channels: Sequence[ChannelSpec], kind: str) -> list[int]:
    return [i for i, c in enumerate(channels) if c.kind == kind]


def stack_sequences(seqs: Iterable[FieldSequence]) -> np.ndarray:
    return np.stack([s.values for s in seqs])
