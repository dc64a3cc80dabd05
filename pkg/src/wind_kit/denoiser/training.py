"""Diffusion-forcing training loop: independent noise level per frame."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..core import DataError, GridSpec, NumericalError, SeedPolicy, area_weights
from ..schedule import DEFAULT_SCHEDULE, ScheduleParams, alpha, beta
from .conv import Checkpoint, NetConfig, UNetLite, conditioning, predict, state_arrays


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    max_steps: int | None = 200  # caps the step count implied by ``epochs``
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.05
    lr_floor: float = 0.1  # cosine decays to this fraction of the peak
    clip_norm: float = 0.8
    ema_decay: float = 0.999
    channel_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.peak_lr < 0 or self.clip_norm <= 0:
            raise ValueError("peak_lr must be >= 0 and clip_norm > 0")
        if not 0 <= self.warmup_fraction < 1 or not 0 <= self.lr_floor <= 1:
            raise ValueError("warmup_fraction in [0, 1) and lr_floor in [0, 1] required")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.channel_weights is not None:
            object.__setattr__(self, "channel_weights", tuple(float(w) for w in self.channel_weights))
            if any(w <= 0 for w in self.channel_weights):
                raise ValueError("channel weights must be positive")

    def lr_at(self, step: int, total: int) -> float:
        """Linear warmup then cosine decay from the peak to ``lr_floor * peak``."""
        warm = int(round(self.warmup_fraction * total))
        if step < warm:
            return self.peak_lr * (step + 1) / warm
        frac = (step - warm) / max(1, total - warm)
        cos = 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))
        return self.peak_lr * (self.lr_floor + (1 - self.lr_floor) * cos)


class WindowDataset:
    """All length-``T`` windows of a normalized ``N x C x H x W`` array."""

    def __init__(self, values: np.ndarray, window: int, start_hour: float = 0.0, stride_hours: float = 6.0):
        values = np.asarray(values)
        if values.ndim != 4:
            raise DataError("dataset values must be N x C x H x W", "shape")
        if values.shape[0] < window:
            raise DataError(f"need at least {window} frames, got {values.shape[0]}", "frames")
        self.values = values.astype(np.float32)
        self.window = window
        self.start_hour = float(start_hour)
        self.stride_hours = float(stride_hours)

    def __len__(self) -> int:
        return self.values.shape[0] - self.window + 1

    def batch(self, starts) -> np.ndarray:
        return np.stack([self.values[s : s + self.window] for s in starts])

    def hours(self, start: int) -> float:
        return self.start_hour + self.stride_hours * start


@dataclass
class TrainResult:
    model: UNetLite
    ema: UNetLite
    losses: list[float]
    lrs: list[float]

    def checkpoint(self, net: NetConfig, grid: GridSpec, cfg: TrainConfig, meta: dict | None = None) -> Checkpoint:
        info = {"train": asdict(cfg), "final_loss": self.losses[-1] if self.losses else None}
        info.update(meta or {})
        return Checkpoint(net, grid, state_arrays(self.model), state_arrays(self.ema), cfg.seed, info)


def total_steps(cfg: TrainConfig, n_windows: int) -> int:
    per_epoch = max(1, n_windows // cfg.batch_size)
    steps = cfg.epochs * per_epoch
    return min(steps, cfg.max_steps) if cfg.max_steps is not None else steps


def train(
    dataset: WindowDataset,
    net: NetConfig,
    grid: GridSpec,
    cfg: TrainConfig,
    p: ScheduleParams = DEFAULT_SCHEDULE,
    init: UNetLite | None = None,
) -> TrainResult:
    if dataset.values.shape[1] != net.n_channels or dataset.window != net.n_frames:
        raise DataError("dataset layout does not match the network configuration", "shape")
    seeds = SeedPolicy(cfg.seed)
    torch.manual_seed(seeds.int_seed("init"))
    model = UNetLite(net) if init is None else copy.deepcopy(init)
    model = model.float().train()
    ema = copy.deepcopy(model).eval()
    for prm in ema.parameters():
        prm.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.peak_lr)
    rng = seeds.rng("batches")

    C = net.n_channels
    w_c = np.ones(C) if cfg.channel_weights is None else np.asarray(cfg.channel_weights)
    if w_c.size != C:
        raise DataError(f"expected {C} channel weights, got {w_c.size}", "channel_weights")
    weight = torch.from_numpy((w_c[:, None, None] * area_weights(grid)[None]).astype(np.float32))
    cond_cache: dict[float, torch.Tensor] = {}

    def cond_for(hour: float) -> torch.Tensor:
        # time embeddings only depend on the hour modulo a year
        key = round(hour % 8760.0, 6)
        if key not in cond_cache:
            c = conditioning(grid, net.n_frames, hour, dataset.stride_hours)[0]
            cond_cache[key] = torch.from_numpy(c.astype(np.float32))
        return cond_cache[key]

    n_steps = total_steps(cfg, len(dataset))
    losses: list[float] = []
    lrs: list[float] = []
    B, T = cfg.batch_size, net.n_frames
    for step in range(n_steps):
        starts = rng.integers(0, len(dataset), size=B)
        x = torch.from_numpy(dataset.batch(starts))
        k = rng.uniform(0.0, 1.0, size=(B, T))
        eps = torch.from_numpy(rng.standard_normal(x.shape).astype(np.float32))
        a = torch.from_numpy(np.asarray(alpha(k, p), dtype=np.float32)).reshape(B, T, 1, 1, 1)
        b = torch.from_numpy(np.asarray(beta(k, p), dtype=np.float32)).reshape(B, T, 1, 1, 1)
        z = a * x + b * eps
        cond = torch.stack([cond_for(dataset.hours(int(s))) for s in starts])
        kt = torch.from_numpy(k.astype(np.float32))
        x_hat = predict(model, net, z, cond, kt)
        loss = ((x_hat - x) ** 2 * weight).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite training loss at step {step} (lr={lrs[-1] if lrs else cfg.peak_lr:g}, "
                f"window starts {starts.tolist()}, max |x_hat|={float(x_hat.detach().abs().max()):g})"
            )
        lr = cfg.lr_at(step, n_steps)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        opt.step()
        decay = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
        with torch.no_grad():
            for pe, pm in zip(ema.parameters(), model.parameters()):
                pe.mul_(decay).add_(pm.detach(), alpha=1.0 - decay)
            for be, bm in zip(ema.buffers(), model.buffers()):
                be.copy_(bm)
        losses.append(value)
        lrs.append(lr)
    return TrainResult(model.eval(), ema, losses, lrs)
