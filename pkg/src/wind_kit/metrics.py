"""Ensemble verification scores, weighted RMSE, zonal spectra and histograms.

Fields are ``... x H x W``; ensembles carry the member axis first.  Area
weights ``a`` are ``H x W`` (usually :func:`wind_kit.core.area_weights`).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DataError


def _weighted_mean(x: np.ndarray, a) -> np.ndarray:
    """Mean over the last two axes with weights ``a`` (normalised to mean one)."""
    a = np.asarray(a, dtype=np.float64)
    a = a / a.mean()
    return np.mean(x * a, axis=(-2, -1))


def _check_ensemble(ens, truth):
    ens = np.asarray(ens, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if ens.shape[0] < 2:
        raise DataError("ensemble scores need at least two members", "ensemble")
    if ens.shape[1:] != truth.shape:
        raise DataError(f"ensemble {ens.shape} does not match truth {truth.shape}", "shape")
    return ens, truth


def crps_pointwise(ens, truth) -> np.ndarray:
    """Fair CRPS per point: ``mean|x_m - y| - sum_{m != m'} |x_m - x_m'| / (2 M (M - 1))``."""
    ens, truth = _check_ensemble(ens, truth)
    M = ens.shape[0]
    term1 = np.mean(np.abs(ens - truth), axis=0)
    # sum over ordered pairs of |x_m - x_m'| from the sorted members
    s = np.sort(ens, axis=0)
    coef = (2 * np.arange(M) - M + 1).reshape((M,) + (1,) * (ens.ndim - 1))
    pair_sum = 2.0 * np.sum(coef * s, axis=0)
    return term1 - pair_sum / (2.0 * M * (M - 1))


def crps(ens, truth, a) -> np.ndarray:
    """Area-weighted mean of the fair CRPS over the last two axes."""
    return _weighted_mean(crps_pointwise(ens, truth), a)


def spread(ens, a) -> np.ndarray:
    """``sqrt`` of the area-weighted mean of the unbiased ensemble variance."""
    ens = np.asarray(ens, dtype=np.float64)
    if ens.shape[0] < 2:
        raise DataError("spread needs at least two members", "ensemble")
    return np.sqrt(_weighted_mean(np.var(ens, axis=0, ddof=1), a))


def skill(ens, truth, a) -> np.ndarray:
    """Area-weighted RMSE of the ensemble mean."""
    ens, truth = _check_ensemble(ens, truth)
    return rmse_weighted(ens.mean(axis=0), truth, a)


def ssr(ens, truth, a) -> np.ndarray:
    """``sqrt((M + 1) / M) * spread / skill``; ``inf`` where the skill is zero."""
    ens, truth = _check_ensemble(ens, truth)
    M = ens.shape[0]
    sp = spread(ens, a)
    sk = skill(ens, truth, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt((M + 1) / M) * sp / sk
    return np.where(sk > 0, out, np.inf)


def rmse_weighted(pred, truth, a) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} does not match truth {truth.shape}", "shape")
    return np.sqrt(_weighted_mean((pred - truth) ** 2, a))


def zonal_psd(field_, a=None) -> np.ndarray:
    """One-sided zonal power per integer wavenumber ``0..W//2``.

    Rows are Fourier transformed along longitude, power is ``|F_m|^2 / W^2``
    with positive and negative wavenumbers folded together, and rows are
    averaged with latitude weights.  The sum over wavenumbers equals the
    weighted mean over rows of ``mean_lon |field|^2`` (Parseval).
    """
    f = np.asarray(field_, dtype=np.float64)
    if f.ndim < 2:
        raise DataError("zonal_psd needs at least a lat x lon field", "shape")
    H, W = f.shape[-2:]
    if W < 4:
        raise DataError("zonal_psd needs at least 4 longitudes", "shape")
    spec = np.abs(np.fft.rfft(f, axis=-1)) ** 2 / (W * W)
    fold = np.full(spec.shape[-1], 2.0)
    fold[0] = 1.0
    if W % 2 == 0:
        fold[-1] = 1.0
    spec = spec * fold
    w = np.ones(H) if a is None else np.asarray(a, dtype=np.float64)
    if w.ndim == 2:
        w = w.mean(axis=-1)
    w = w / w.sum()
    return np.tensordot(spec, w, axes=([-2], [0]))


def histogram_counts(values, edges) -> np.ndarray:
    """Left-closed bin counts with an underflow bin first and an overflow bin last.

    The result has ``len(edges) + 1`` entries: ``x < edges[0]``, then
    ``edges[i] <= x < edges[i+1]``, then ``x >= edges[-1]``.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise DataError("histogram needs at least two edges", "edges")
    if np.any(np.diff(edges) <= 0):
        raise DataError("histogram edges must be strictly increasing", "edges")
    x = np.asarray(values, dtype=np.float64).ravel()
    idx = np.searchsorted(edges, x, side="right")
    return np.bincount(idx, minlength=edges.size + 1)


@dataclass
class MetricReport:
    """Rows of ``(channel, lead_hours, metric, value)`` plus provenance."""

    rows: list[tuple[str, float, str, float]] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, channel: str, lead_hours: float, metric: str, value: float) -> None:
        value = float(value)
        if not (np.isfinite(value) or value == np.inf):
            raise DataError(f"metric {metric} for {channel} is not finite", metric)
        self.rows.append((channel, float(lead_hours), metric, value))

    def add_ensemble_scores(self, ens, truth, a, channels, hours) -> None:
        """CRPS, spread, skill and SSR per channel and lead for ``M x T x C x H x W`` ensembles."""
        ens, truth = _check_ensemble(ens, truth)
        scores = {
            "crps": crps(ens, truth, a),
            "spread": spread(ens, a),
            "skill": skill(ens, truth, a),
            "ssr": ssr(ens, truth, a),
        }
        for t, h in enumerate(hours):
            for c, name in enumerate(channels):
                for metric, table in scores.items():
                    self.add(name, h, metric, table[t, c])

    def value(self, channel: str, lead_hours: float, metric: str) -> float:
        for c, h, m, v in self.rows:
            if c == channel and h == lead_hours and m == metric:
                return v
        raise KeyError((channel, lead_hours, metric))

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "lead_hours", "metric", "value"])
            for c, h, m, v in self.rows:
                w.writerow([c, repr(h), m, repr(v)])
        Path(str(path.with_suffix("")) + ".provenance.json").write_text(json.dumps(self.provenance, indent=2, sort_keys=True))

    @classmethod
    def read(cls, path: str | Path) -> "MetricReport":
        path = Path(path)
        rows = []
        with path.open() as fh:
            for r in csv.DictReader(fh):
                rows.append((r["channel"], float(r["lead_hours"]), r["metric"], float(r["value"])))
        prov_path = Path(str(path.with_suffix("")) + ".provenance.json")
        prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
        return cls(rows, prov)
