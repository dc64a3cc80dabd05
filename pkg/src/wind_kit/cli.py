"""Command-line front end.

Every subcommand reads an optional YAML run config (``--config``), applies
command-line overrides, validates the result and writes the resolved config
plus its hash next to its outputs, so a rerun with the same config and seed
reproduces the same blobs bit for bit.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .core import ConfigError, DataError, FieldSequence, NumericalError, SeedPolicy, area_weights, read_blob, write_blob
from .datagen import (
    NormStats,
    WorldConfig,
    denormalize_array,
    generate,
    normalize,
    orography,
    split_sequence,
)
from .guidance import GuidanceConfig
from .metrics import MetricReport, histogram_counts, rmse_weighted, zonal_psd
from .operators import avgpool_spatial, random_mask, sparse_mask, temporal_mean
from .sampler import SamplerConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
_WORLD = WorldConfig()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    dir: str = "runs/data"
    frames: int = 1460
    n_lat: int = 16
    n_lon: int = 32
    advection_speed: float = _WORLD.advection_speed
    wave_amplitude: float = _WORLD.wave_amplitude
    divergence_amplitude: float = _WORLD.divergence_amplitude
    diffusivity: float = _WORLD.diffusivity
    forcing_amplitude: float = _WORLD.forcing_amplitude
    noise_amplitude: float = _WORLD.noise_amplitude
    relax_hours_t: float = _WORLD.relax_hours_t
    relax_hours_q: float = _WORLD.relax_hours_q
    stride_hours: float = _WORLD.stride_hours
    substeps: int = _WORLD.substeps
    spinup_days: float = _WORLD.spinup_days
    precip_threshold: float = _WORLD.precip_threshold
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def world(self, seed: int) -> WorldConfig:
        fields = self.model_dump(exclude={"dir", "frames", "splits"})
        return WorldConfig(seed=seed, **fields)


class ModelSection(_Section):
    checkpoint: str = "runs/train/model.json"
    n_frames: int = 5
    widths: tuple[int, ...] = (32, 48, 64)
    groups: int = 8
    noise_conditioning: bool = False
    use_ema: bool = True


class TrainSection(_Section):
    epochs: int = 1000
    max_steps: int | None = 200
    batch_size: int = 8
    peak_lr: float = 2e-3
    warmup_fraction: float = 0.05
    lr_floor: float = 0.1
    clip_norm: float = 0.8
    ema_decay: float = 0.999
    channel_weights: tuple[float, ...] | None = None


class SamplerSection(_Section):
    n_steps: int = 15
    eta: float = 0.0


class GuidanceSection(_Section):
    method: str = "mmps"
    cg_iters: int = 2
    delta_sq: float = 0.0015
    strength: float = 1.0
    every: int = 1


class TaskSection(_Section):
    members: int = 4
    start_index: int = 0  # first frame of the task window within the test split
    factor: int = 2
    agg: int = 4
    mask: str = "0.1"  # observed fraction, or a path to a .npy boolean H x W mask
    target: str = "auto"
    n_windows: int = 4
    rel_scale: float = 1e-4
    delta_t: float = 2.0
    q_scale: float = 1.07**2
    constrain_humidity: bool = True
    storyline_steps: int = 10
    storyline_eta: float = 1.0
    storyline_delta_sq: float = 1e-3
    storyline_cg_iters: int = 10


class OutputSection(_Section):
    dir: str | None = None  # defaults to runs/<subcommand>


class RunConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    sampler: SamplerSection = SamplerSection()
    guidance: GuidanceSection = GuidanceSection()
    task: TaskSection = TaskSection()
    output: OutputSection = OutputSection()

    def config_hash(self) -> str:
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def sampler_config(self) -> SamplerConfig:
        return _engine(SamplerConfig, n_steps=self.sampler.n_steps, eta=self.sampler.eta)

    def guidance_config(self) -> GuidanceConfig:
        return _engine(GuidanceConfig, **self.guidance.model_dump())


def _engine(cls, **kwargs):
    """Build an engine config, turning its validation errors into config errors."""
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


# ------------------------------------------------------------------ config loading


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def load_config(path: str | None, overrides: list[tuple[str, object]] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {p} must hold a mapping at the top level")
    for dotted, value in overrides:
        _set_path(raw, dotted, value)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid run config:\n" + "\n".join(lines)) from exc
    # engine-level checks before any work starts
    _check_world(cfg)
    cfg.sampler_config()
    cfg.guidance_config()
    return cfg


def _check_world(cfg: RunConfig) -> None:
    try:
        cfg.data.world(cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid data section: {exc}") from exc


def _parse_set(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


# ------------------------------------------------------------------ run context


class Run:
    """Output directory, provenance and shared loaders for one subcommand."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.seeds = SeedPolicy(cfg.seed)
        self.out = Path(cfg.output.dir or f"runs/{command}")
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.resolved.yaml").write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
        self.files: list[str] = []

    @property
    def provenance(self) -> dict:
        return {"command": self.command, "config_hash": self.hash, "seed": self.cfg.seed}

    def blob(self, name: str, seq: FieldSequence, **extra) -> None:
        write_blob(seq, self.out / name, extra={**self.provenance, **extra})
        self.files.append(name)

    def table(self, name: str, header: list[str], rows) -> None:
        with (self.out / name).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self.files.append(name)

    def finish(self) -> None:
        info = dict(self.provenance, files=sorted(self.files))
        (self.out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True))

    # -------------------------------------------------------------- loaders
    def data_dir(self) -> Path:
        d = Path(self.cfg.data.dir)
        if not (d / "dataset.json").exists():
            raise DataError(f"no dataset in {d}; run `wind-kit gen-data` first or set data.dir", "data.dir")
        return d

    def dataset_info(self) -> dict:
        return json.loads((self.data_dir() / "dataset.json").read_text())

    def stats(self) -> NormStats:
        return NormStats.load(self.data_dir() / "stats.json")

    def split(self, name: str) -> FieldSequence:
        return read_blob(self.data_dir() / f"{name}.bin")

    def world(self) -> WorldConfig:
        return WorldConfig(**self.dataset_info()["world"])

    def denoiser(self):
        from .denoiser import load_checkpoint

        path = Path(self.cfg.model.checkpoint)
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run `wind-kit train` first or set model.checkpoint", "model.checkpoint")
        ckpt = load_checkpoint(path)
        return ckpt.denoiser(use_ema=self.cfg.model.use_ema)

    def task_window(self):
        """Normalized test-split window at ``task.start_index`` and its start hour."""
        test = self.split("test")
        stats = self.stats()
        T = self.cfg.model.n_frames
        s = self.cfg.task.start_index
        if not 0 <= s <= test.frames - T:
            raise DataError(f"start_index {s} leaves no {T}-frame window in a test split of {test.frames}", "task.start_index")
        win = test.window(s, T)
        return normalize(win, stats), win, stats

    def write_ensemble(self, prefix: str, ens_norm, like: FieldSequence, stats: NormStats) -> np.ndarray:
        phys = denormalize_array(ens_norm, like.channels, stats)
        for m, member in enumerate(phys):
            self.blob(f"{prefix}_{m:03d}.bin", like.with_values(member), member=m)
        return phys


# ------------------------------------------------------------------ subcommands


def cmd_gen_data(run: Run) -> None:
    d = run.cfg.data
    world = d.world(run.cfg.seed)
    seq = generate(world, d.frames)
    try:
        splits, bounds = split_sequence(seq, d.splits)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stats = NormStats.from_sequence(splits["train"])
    out = Path(d.dir)
    out.mkdir(parents=True, exist_ok=True)
    stats.save(out / "stats.json")
    for name, part in splits.items():
        write_blob(part, out / f"{name}.bin", stats_ref="stats.json", extra={**run.provenance, "split": name})
    np.save(out / "orography.npy", orography(world))
    info = {"world": world.to_json(), "frames": d.frames, "bounds": bounds, **run.provenance}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    run.files.append(str(out))


def cmd_train(run: Run) -> None:
    from .denoiser import NetConfig, TrainConfig, WindowDataset, save_checkpoint, train

    c = run.cfg
    stats = run.stats()
    tr = normalize(run.split("train"), stats)
    net = _engine(NetConfig, n_frames=c.model.n_frames, n_channels=tr.values.shape[1], widths=c.model.widths,
                  groups=c.model.groups, noise_conditioning=c.model.noise_conditioning)
    tcfg = _engine(TrainConfig, seed=c.seed, **c.train.model_dump())
    ds = WindowDataset(tr.values, net.n_frames, tr.start_hour, tr.stride_hours)
    res = train(ds, net, tr.grid, tcfg)
    ckpt = res.checkpoint(net, tr.grid, tcfg, {**run.provenance, "data_dir": c.data.dir})
    save_checkpoint(ckpt, run.out / "model.json")
    run.files += ["model.json", "model.json.bin"]
    run.table("loss_curve.csv", ["step", "loss", "lr"], [(i, float(l), float(r)) for i, (l, r) in enumerate(zip(res.losses, res.lrs))])


def _lead_hours(seq: FieldSequence):
    return [float(h - seq.start_hour) for h in seq.hours]


def cmd_forecast(run: Run) -> None:
    from .tasks import forecast_ensemble

    c = run.cfg
    norm, truth, stats = run.task_window()
    den = run.denoiser()
    ens = forecast_ensemble(den, norm.values[0], c.task.members, run.cfg.sampler_config(), run.seeds, norm.start_hour)
    phys = run.write_ensemble("member", ens, truth, stats)
    report = MetricReport(provenance=run.provenance)
    if c.task.members >= 2:
        leads = _lead_hours(truth)
        report.add_ensemble_scores(phys[:, 1:], truth.values[1:], area_weights(truth.grid), [ch.name for ch in truth.channels], leads[1:])
    report.write(run.out / "metrics.csv")
    run.files += ["metrics.csv", "metrics.provenance.json"]


def _psd_rows(label, fields, channels):
    rows = []
    for ci, ch in enumerate(channels):
        f = fields[..., ci, :, :]
        psd = zonal_psd(f - f.mean(axis=-1, keepdims=True)).reshape(-1, fields.shape[-1] // 2 + 1).mean(axis=0)
        rows += [(label, ch.name, m, float(v)) for m, v in enumerate(psd)]
    return rows


def _rmse_rows(label, pred, truth):
    a = area_weights(truth.grid)
    r = rmse_weighted(pred, truth.values, a).mean(axis=0)
    return [(label, ch.name, float(v)) for ch, v in zip(truth.channels, r)]


def cmd_downscale_spatial(run: Run) -> None:
    from .tasks import spatial_downscale

    c = run.cfg
    norm, truth, stats = run.task_window()
    op = avgpool_spatial(c.task.factor)
    coarse = op.apply(norm.values)
    coarse_phys = denormalize_array(coarse, truth.channels, stats)
    from .core import GridSpec

    cgrid = GridSpec.regular(truth.grid.n_lat // c.task.factor, truth.grid.n_lon // c.task.factor)
    run.blob("coarse.bin", FieldSequence(cgrid, truth.channels, coarse_phys, truth.stride_hours, truth.start_hour))
    ens = spatial_downscale(run.denoiser(), coarse, c.task.factor, c.task.members, c.sampler_config(), c.guidance_config(), run.seeds, norm.start_hour)
    phys = run.write_ensemble("member", ens, truth, stats)
    run.table("psd.csv", ["source", "channel", "wavenumber", "power"],
              _psd_rows("truth", truth.values, truth.channels) + _psd_rows("ensemble", phys, truth.channels))
    upsampled = np.repeat(np.repeat(coarse_phys, c.task.factor, axis=-2), c.task.factor, axis=-1)
    rows = _rmse_rows("ensemble_mean", phys.mean(axis=0), truth) + _rmse_rows("upsampled_coarse", upsampled, truth)
    run.table("rmse.csv", ["prediction", "channel", "rmse"], rows)


def _residual_rows(op, ens, y, channels, per_channel_axis):
    rows = []
    for m, member in enumerate(ens):
        res = np.abs(op.apply(member) - y)
        for ci, ch in enumerate(channels):
            r = np.take(res, ci, axis=per_channel_axis) if per_channel_axis is not None else res
            rows.append((m, ch.name, float(np.max(r)), float(np.sqrt(np.mean(r**2)))))
            if per_channel_axis is None:
                break
    return rows


def cmd_downscale_temporal(run: Run) -> None:
    from .tasks import temporal_downscale

    c = run.cfg
    norm, truth, stats = run.task_window()
    op = temporal_mean(c.task.agg)
    y = op.apply(norm.values)
    run.blob("mean_field.bin", truth.with_values(denormalize_array(y[None], truth.channels, stats)))
    ens = temporal_downscale(run.denoiser(), y, c.task.agg, c.task.members, c.sampler_config(), c.guidance_config(), run.seeds, norm.start_hour)
    run.write_ensemble("member", ens, truth, stats)
    run.table("consistency.csv", ["member", "channel", "max_abs_residual", "rms_residual"],
              _residual_rows(op, ens, y, truth.channels, 0))


def _load_mask(spec: str, shape, rng) -> np.ndarray:
    path = Path(spec)
    if path.suffix == ".npy" or path.exists():
        if not path.exists():
            raise DataError(f"missing mask file {path}", "task.mask")
        mask = np.load(path)
        if mask.shape != tuple(shape):
            raise DataError(f"mask {mask.shape} does not match grid {tuple(shape)}", "task.mask")
        return mask.astype(bool)
    try:
        density = float(spec)
    except ValueError as exc:
        raise ConfigError(f"task.mask must be a density in (0, 1] or a .npy path, got {spec!r}") from exc
    if not 0 < density <= 1:
        raise ConfigError(f"mask density must lie in (0, 1], got {density}")
    return random_mask(shape, density, rng)


def cmd_reconstruct(run: Run) -> None:
    from .tasks import reconstruct

    c = run.cfg
    norm, truth, stats = run.task_window()
    mask = _load_mask(c.task.mask, truth.grid.shape, run.seeds.rng("mask"))
    np.save(run.out / "mask.npy", mask)
    run.files.append("mask.npy")
    op = sparse_mask(mask)
    y = op.apply(norm.values)
    ens = reconstruct(run.denoiser(), mask, y, c.task.members, c.sampler_config(), c.guidance_config(), run.seeds, norm.start_hour)
    run.write_ensemble("member", ens, truth, stats)
    rows = []
    full = np.broadcast_to(mask, norm.values.shape)
    for m, member in enumerate(ens):
        res = np.abs(member - norm.values)
        for ci, ch in enumerate(truth.channels):
            obs = res[:, ci][full[:, ci]]
            free = res[:, ci][~full[:, ci]]
            rows.append((m, ch.name, float(obs.max()), float(np.sqrt(np.mean(obs**2))), float(np.sqrt(np.mean(free**2)))))
    run.table("residuals.csv", ["member", "channel", "max_abs_observed", "rms_observed", "rms_unobserved"], rows)


def cmd_constrain_dam(run: Run) -> None:
    from .tasks import DamSettings, dam_operator, dam_rollout

    c = run.cfg
    norm, truth, stats = run.task_window()
    phi = np.load(run.data_dir() / "orography.npy")
    op = dam_operator(truth.channels, stats, phi, truth.grid)
    if c.task.target == "auto":
        target = None
    else:
        try:
            target = float(c.task.target)
        except ValueError as exc:
            raise ConfigError(f"task.target must be 'auto' or a number, got {c.task.target!r}") from exc
    settings = DamSettings(rel_scale=c.task.rel_scale, delta_sq=c.guidance.delta_sq, cg_iters=c.guidance.cg_iters)
    den = run.denoiser()
    cfg = c.sampler_config()
    x0 = norm.values[0]
    guided, dam_g, c_dam = dam_rollout(den, x0, c.task.n_windows, op, cfg, run.seeds, target, True, settings, norm.start_hour)
    free, dam_f, _ = dam_rollout(den, x0, c.task.n_windows, op, cfg, run.seeds, c_dam, False, settings, norm.start_hour)
    for name, frames in (("guided", guided), ("unguided", free)):
        phys = denormalize_array(frames, truth.channels, stats)
        run.blob(f"{name}.bin", FieldSequence(truth.grid, truth.channels, phys, truth.stride_hours, truth.start_hour))
    rows = [(i, float(i * truth.stride_hours), float(g), float(f), c_dam, float(abs(g - c_dam) / c_dam), float(abs(f - c_dam) / c_dam))
            for i, (g, f) in enumerate(zip(dam_g, dam_f))]
    run.table("dam.csv", ["frame", "lead_hours", "dam_guided", "dam_unguided", "target", "rel_dev_guided", "rel_dev_unguided"], rows)


def cmd_storyline(run: Run) -> None:
    from .tasks import storyline

    c = run.cfg
    t = c.task
    norm, truth, stats = run.task_window()
    scfg = _engine(SamplerConfig, n_steps=t.storyline_steps, eta=t.storyline_eta)
    gcfg = _engine(GuidanceConfig, method=c.guidance.method, cg_iters=t.storyline_cg_iters, delta_sq=t.storyline_delta_sq)
    res = storyline(run.denoiser(), norm.values[0], truth.channels, stats, t.members, run.seeds, t.delta_t, t.q_scale,
                    scfg, gcfg, t.constrain_humidity, norm.start_hour)
    ti = res.temperature_channel
    rows = []
    for name, ens in (("control", res.control), ("warm_free", res.warm_free), ("warm_guided", res.warm_guided)):
        phys = run.write_ensemble(name, ens, truth, stats)
        anomaly = res.anomaly(ens) * stats.std[ti]
        for f in range(phys.shape[1]):
            field = phys[:, f, ti]
            rows.append((name, f, float(f * truth.stride_hours), float(field.mean()), float(field.max(axis=(-2, -1)).mean()), float(anomaly[f])))
    run.table("peak_statistics.csv", ["scenario", "frame", "lead_hours", "mean_temperature", "mean_member_peak", "anomaly_vs_control"], rows)


def cmd_evaluate(run: Run, pred: list[str], truth_path: str, edges: list[float] | None) -> None:
    truth = read_blob(truth_path)
    preds = [read_blob(p) for p in pred]
    for p, seq in zip(pred, preds):
        if not seq.same_layout(truth) or seq.values.shape != truth.values.shape:
            raise DataError(f"prediction {p} {seq.values.shape} does not match truth {truth.values.shape}", "pred")
    ens = np.stack([s.values for s in preds])
    a = area_weights(truth.grid)
    names = [ch.name for ch in truth.channels]
    leads = _lead_hours(truth)
    report = MetricReport(provenance={**run.provenance, "pred": list(pred), "truth": truth_path})
    if len(preds) >= 2:
        report.add_ensemble_scores(ens, truth.values, a, names, leads)
    r = rmse_weighted(ens.mean(axis=0), truth.values, a)
    for ti, h in enumerate(leads):
        for ci, name in enumerate(names):
            report.add(name, h, "rmse", r[ti, ci])
    report.write(run.out / "metrics.csv")
    run.files += ["metrics.csv", "metrics.provenance.json"]
    run.table("psd.csv", ["source", "channel", "wavenumber", "power"],
              _psd_rows("truth", truth.values, truth.channels) + _psd_rows("prediction", ens, truth.channels))
    if edges:
        rows = []
        for ci, name in enumerate(names):
            for label, vals in (("truth", truth.values[:, ci]), ("prediction", ens[:, :, ci])):
                rows += [(label, name, i, int(n)) for i, n in enumerate(histogram_counts(vals, edges))]
        run.table("histogram.csv", ["source", "channel", "bin", "count"], rows)


# ------------------------------------------------------------------ argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wind-kit", description="Generative weather toolkit on a synthetic atmosphere.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--out", help="output directory (output.dir)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config value")
        return p

    add("gen-data", "simulate the synthetic atmosphere and write splits and stats")
    add("train", "train the denoiser and write a checkpoint and loss curve")
    p = add("forecast", "ensemble forecast from a test-split frame")
    p.add_argument("--members", type=int)
    p = add("downscale-spatial", "guided super-resolution of a pooled window")
    p.add_argument("--factor", type=int)
    p.add_argument("--members", type=int)
    p = add("downscale-temporal", "guided reconstruction of a window from its temporal mean")
    p.add_argument("--agg", type=int)
    p.add_argument("--members", type=int)
    p = add("reconstruct", "guided reconstruction from sparse observations")
    p.add_argument("--mask", help="observed fraction or path to a .npy mask")
    p.add_argument("--members", type=int)
    p = add("constrain-dam", "rollout constrained to a constant global dry air mass")
    p.add_argument("--target", help="'auto' or a value in kg/m^2")
    p.add_argument("--windows", type=int)
    p = add("storyline", "control, warm-free and warm-guided ensembles")
    p.add_argument("--delta-t", type=float)
    p.add_argument("--q-scale", type=float)
    p.add_argument("--members", type=int)
    p = add("evaluate", "score predictions against a truth blob")
    p.add_argument("--pred", nargs="+", required=True, help="prediction blob(s); two or more form an ensemble")
    p.add_argument("--truth", required=True, help="truth blob")
    p.add_argument("--edges", type=float, nargs="+", help="histogram bin edges")
    return parser


_FLAG_KEYS = {
    "members": "task.members",
    "factor": "task.factor",
    "agg": "task.agg",
    "mask": "task.mask",
    "target": "task.target",
    "windows": "task.n_windows",
    "delta_t": "task.delta_t",
    "q_scale": "task.q_scale",
    "seed": "seed",
    "out": "output.dir",
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "downscale-spatial": cmd_downscale_spatial,
    "downscale-temporal": cmd_downscale_temporal,
    "reconstruct": cmd_reconstruct,
    "constrain-dam": cmd_constrain_dam,
    "storyline": cmd_storyline,
}


def _configure_threads() -> None:
    import torch

    raw = os.environ.get("WIND_KIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"WIND_KIT_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"WIND_KIT_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def run_command(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    overrides = [_parse_set(s) for s in args.set]
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((key, value))
    cfg = load_config(args.config, overrides)
    _configure_threads()
    run = Run(args.command, cfg)
    if args.command == "evaluate":
        cmd_evaluate(run, args.pred, args.truth, args.edges)
    else:
        COMMANDS[args.command](run)
    run.finish()
    print(f"{args.command}: wrote {run.out} (config {run.hash})")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run_command(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
