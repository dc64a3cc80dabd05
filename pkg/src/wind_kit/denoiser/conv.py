"""Small convolutional U-Net denoiser with exact Jacobian actions.

The network sees the noisy window ``Z`` (frames stacked into channels) plus
coordinate and time embeddings and predicts a correction added to ``Z``.  The
output convolution is zero-initialised so an untrained network is the
identity map ``X_hat = Z``.

Weights are trained in float32; inference runs on a float64 copy so that
``jvp``/``vjp`` agree with finite differences to high precision.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import jvp as torch_jvp
from torch.func import vjp as torch_vjp

from ..core import DataError, GridSpec
from ..datagen import spatial_embeddings, time_embeddings
from .base import DenoiserBase, Linearization


@dataclass(frozen=True)
class NetConfig:
    n_frames: int = 5
    n_channels: int = 6
    widths: tuple[int, ...] = (32, 48, 64)
    groups: int = 8
    noise_conditioning: bool = False  # append k as T extra input channels

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not 3 <= len(self.widths) <= 5:
            raise ValueError("the network uses 3 to 5 residual stages")
        if max(self.widths) > 64 or min(self.widths) < 1:
            raise ValueError("stage widths must lie in [1, 64]")
        if any(w % self.groups for w in self.widths):
            raise ValueError("stage widths must be divisible by the group count")
        if self.n_frames < 1 or self.n_channels < 1:
            raise ValueError("n_frames and n_channels must be positive")

    @property
    def in_channels(self) -> int:
        extra = self.n_frames if self.noise_conditioning else 0
        return self.n_frames * self.n_channels + 3 + 4 * self.n_frames + extra

    @property
    def out_channels(self) -> int:
        return self.n_frames * self.n_channels

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.widths) - 1)


def geo_pad(x: torch.Tensor, p: int) -> torch.Tensor:
    """Periodic padding in longitude (last axis), reflection in latitude."""
    x = torch.cat([x[..., -p:], x, x[..., :p]], dim=-1)
    return F.pad(x, (0, 0, p, p), mode="reflect")


class GeoConv(nn.Conv2d):
    def __init__(self, cin, cout, kernel=3):
        super().__init__(cin, cout, kernel, padding=0)
        self.p = kernel // 2

    def forward(self, x):
        if self.p:
            x = geo_pad(x, self.p)
        return super().forward(x)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = GeoConv(cin, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = GeoConv(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNetLite(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.widths
        self.stem = GeoConv(cfg.in_channels, w[0])
        self.down = nn.ModuleList()
        prev = w[0]
        for width in w:
            self.down.append(ResBlock(prev, width, cfg.groups))
            prev = width
        self.mid = ResBlock(w[-1], w[-1], cfg.groups)
        self.up_proj = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in range(len(w) - 2, -1, -1):
            self.up_proj.append(nn.Conv2d(w[i + 1], w[i], 1))
            self.up.append(ResBlock(w[i], w[i], cfg.groups))
        self.out_norm = nn.GroupNorm(cfg.groups, w[0])
        self.out = GeoConv(w[0], cfg.out_channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        h = self.stem(x)
        skips = []
        n = len(self.down)
        for i, block in enumerate(self.down):
            h = block(h)
            if i < n - 1:
                skips.append(h)
                h = F.avg_pool2d(h, 2)
        h = self.mid(h)
        for proj, block in zip(self.up_proj, self.up):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = proj(h) + skips.pop()
            h = block(h)
        return self.out(F.silu(self.out_norm(h)))


def build_inputs(z: torch.Tensor, cond: torch.Tensor, k: torch.Tensor | None) -> torch.Tensor:
    """Concatenate ``Z`` (``B x T x C x H x W``) with conditioning channels."""
    B, T, C, H, W = z.shape
    parts = [z.reshape(B, T * C, H, W), cond.expand(B, -1, -1, -1)]
    if k is not None:
        parts.append(k.reshape(B, T, 1, 1).expand(B, T, H, W).to(z.dtype))
    return torch.cat(parts, dim=1)


def predict(model: UNetLite, cfg: NetConfig, z: torch.Tensor, cond: torch.Tensor, k=None) -> torch.Tensor:
    """``X_hat = Z + net([Z, embeddings])`` for a batch ``B x T x C x H x W``."""
    kk = k if cfg.noise_conditioning else None
    out = model(build_inputs(z, cond, kk))
    return z + out.reshape(z.shape)


def conditioning(grid: GridSpec, n_frames: int, start_hour: float, stride_hours: float) -> np.ndarray:
    """Spatial embeddings plus per-frame time embeddings stacked as channels."""
    hours = start_hour + stride_hours * np.arange(n_frames)
    t = time_embeddings(grid, hours).reshape(4 * n_frames, *grid.shape)
    return np.concatenate([spatial_embeddings(grid), t])[None]


class ConvDenoiser(DenoiserBase):
    """Wraps a :class:`UNetLite` as a clean-state predictor for one window.

    ``start_hour``/``stride_hours`` fix the time embeddings of the window;
    :meth:`with_time` returns a copy bound to another window.
    """

    def __init__(self, model: UNetLite, cfg: NetConfig, grid: GridSpec, start_hour=0.0, stride_hours=6.0):
        self.cfg = cfg
        self.grid = grid
        if grid.n_lat % cfg.divisor or grid.n_lon % cfg.divisor:
            raise DataError(f"grid dimensions must be divisible by {cfg.divisor}", "grid")
        self.model = copy.deepcopy(model).double().eval()
        for prm in self.model.parameters():
            prm.requires_grad_(False)
        self.start_hour = float(start_hour)
        self.stride_hours = float(stride_hours)
        self._cond = torch.from_numpy(conditioning(grid, cfg.n_frames, self.start_hour, self.stride_hours))

    @property
    def window_shape(self) -> tuple[int, int, int, int]:
        return (self.cfg.n_frames, self.cfg.n_channels) + self.grid.shape

    def with_time(self, start_hour: float, stride_hours: float | None = None) -> "ConvDenoiser":
        new = object.__new__(ConvDenoiser)
        new.__dict__.update(self.__dict__)
        new.start_hour = float(start_hour)
        if stride_hours is not None:
            new.stride_hours = float(stride_hours)
        new._cond = torch.from_numpy(conditioning(self.grid, self.cfg.n_frames, new.start_hour, new.stride_hours))
        return new

    def _check(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-4:] != self.window_shape:
            raise DataError(f"expected window shape {self.window_shape}, got {z.shape}", "shape")
        return z

    def _k_tensor(self, k, batch):
        if not self.cfg.noise_conditioning:
            return None
        k = torch.from_numpy(np.array(np.broadcast_to(np.asarray(k, dtype=np.float64), (self.cfg.n_frames,))))
        return k.expand(batch, -1)

    def _fn(self, k, batch=1):
        kt = self._k_tensor(k, batch)

        def f(zt):
            return predict(self.model, self.cfg, zt, self._cond, kt)

        return f

    def denoise(self, z, k=None):
        """``X_hat`` for one window ``T x C x H x W`` or a batch ``B x T x C x H x W``."""
        z = self._check(z)
        single = z.ndim == 4
        zb = z[None] if single else z
        with torch.no_grad():
            out = self._fn(k, zb.shape[0])(torch.from_numpy(zb)).numpy()
        return out[0] if single else out

    def linearize(self, z, k=None) -> Linearization:
        z = self._check(z)
        if z.ndim != 4:
            raise DataError("linearize works on a single window", "shape")
        f = self._fn(k)
        zt = torch.from_numpy(z[None].copy())
        out, vjp_fn = torch_vjp(f, zt)

        def jvp(u):
            u = torch.from_numpy(np.asarray(u, dtype=np.float64).reshape(zt.shape))
            return torch_jvp(f, (zt,), (u,))[1][0].numpy()

        def vjp(v):
            v = torch.from_numpy(np.asarray(v, dtype=np.float64).reshape(zt.shape))
            return vjp_fn(v)[0][0].numpy()

        return Linearization(out[0].detach().numpy(), jvp, vjp)

    def jvp(self, z, k, u):
        z = self._check(z)
        f = self._fn(k)
        zt = torch.from_numpy(z[None].copy())
        ut = torch.from_numpy(np.asarray(u, dtype=np.float64).reshape(zt.shape))
        return torch_jvp(f, (zt,), (ut,))[1][0].numpy()


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    net: NetConfig
    grid: GridSpec
    weights: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def model(self, use_ema: bool = True) -> UNetLite:
        model = UNetLite(self.net)
        state = self.ema if use_ema and self.ema else self.weights
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})
        return model

    def denoiser(self, use_ema: bool = True, start_hour=0.0, stride_hours=6.0) -> ConvDenoiser:
        return ConvDenoiser(self.model(use_ema), self.net, self.grid, start_hour, stride_hours)


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """JSON manifest at ``path`` plus a raw little-endian float32 payload at ``path.bin``."""
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for prefix, state in (("model", ckpt.weights), ("ema", ckpt.ema)):
        for name, arr in state.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            entries.append({"name": f"{prefix}.{name}", "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            offset += a.size
            chunks.append(a.tobytes())
    manifest = {
        "format": "wind_kit-weights-v1",
        "dtype": "<f4",
        "seed": int(ckpt.seed),
        "config": asdict(ckpt.net),
        "grid": ckpt.grid.to_json(),
        "meta": ckpt.meta,
        "tensors": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(str(path) + ".bin").write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint manifest not found: {path}", "checkpoint")
    manifest = json.loads(path.read_text())
    payload = np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f4")
    weights, ema = {}, {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["count"]
        if end > payload.size:
            raise DataError("checkpoint payload is truncated", "checkpoint")
        arr = payload[e["offset"] : end].reshape(e["shape"]).copy()
        prefix, name = e["name"].split(".", 1)
        (weights if prefix == "model" else ema)[name] = arr
    cfg = manifest["config"]
    net = NetConfig(**{**cfg, "widths": tuple(cfg["widths"])})
    g = manifest["grid"]
    grid = GridSpec(tuple(g["lat"]), tuple(g["lon"]))
    return Checkpoint(net, grid, weights, ema, manifest.get("seed", 0), manifest.get("meta", {}))
