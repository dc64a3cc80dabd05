import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import crps_loops, rmse_loops
from wind_kit.core import DataError, GridSpec, area_weights
from wind_kit.metrics import (
    MetricReport,
    crps,
    crps_pointwise,
    histogram_counts,
    rmse_weighted,
    skill,
    spread,
    ssr,
    zonal_psd,
)


def test_crps_hand_cases():
    assert crps_pointwise(np.array([0.0, 2.0]), np.array(1.0)) == pytest.approx(0.0, abs=1e-15)
    ens = np.full((5, 3), 2.0)
    truth = np.array([1.0, 2.5, -1.0])
    assert np.allclose(crps_pointwise(ens, truth), np.abs(2.0 - truth))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 7), st.integers(1, 4)), elements=st.floats(-5, 5)),
       arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_crps_matches_pairwise_loops(ens, truth):
    truth = truth[: ens.shape[1]]
    got = crps_pointwise(ens, truth)
    ref = np.array([crps_loops(ens[:, j], truth[j]) for j in range(ens.shape[1])])
    assert np.allclose(got, ref, atol=1e-12)


def test_crps_area_weighted(rng):
    g = GridSpec.regular(4, 8)
    a = area_weights(g)
    ens = rng.standard_normal((4, 4, 8))
    truth = rng.standard_normal((4, 8))
    pw = crps_pointwise(ens, truth)
    assert crps(ens, truth, a) == pytest.approx(np.sum(pw * a) / np.sum(a))


def test_ensemble_needs_two_members(rng):
    with pytest.raises(DataError):
        crps(rng.standard_normal((1, 2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(DataError):
        ssr(rng.standard_normal((3, 2, 2)), np.zeros((2, 3)), np.ones((2, 2)))


def test_rmse_matches_loops(rng):
    a = area_weights(GridSpec.regular(6, 8))
    p, t = rng.standard_normal((2, 6, 8))
    assert rmse_weighted(p, t, a) == pytest.approx(rmse_loops(p, t, a), rel=1e-12)
    assert rmse_weighted(t, t, a) == 0.0


def test_ssr_calibrated_gaussian_ensemble():
    # truth and members are exchangeable draws around a common random mean
    rng = np.random.default_rng(7)
    M, H, W = 50, 100, 100
    centre = rng.standard_normal((H, W))
    ens = centre + rng.standard_normal((M, H, W))
    truth = centre + rng.standard_normal((H, W))
    val = float(ssr(ens, truth, np.ones((H, W))))
    assert 0.95 <= val <= 1.05


def test_ssr_zero_skill_is_inf():
    ens = np.stack([np.zeros((2, 2)) - 1, np.zeros((2, 2)) + 1])
    assert ssr(ens, np.zeros((2, 2)), np.ones((2, 2))) == np.inf


def test_spread_and_skill_shapes(rng):
    ens = rng.standard_normal((4, 3, 2, 5, 6))
    truth = rng.standard_normal((3, 2, 5, 6))
    a = np.ones((5, 6))
    assert spread(ens, a).shape == (3, 2) and skill(ens, truth, a).shape == (3, 2)


def test_psd_white_noise_flat():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2000, 64))
    psd = zonal_psd(f)
    inner = psd[1:-1]  # the mean and Nyquist bins are not folded
    assert np.all(np.abs(inner / inner.mean() - 1) < 0.1)


def test_psd_parseval(rng):
    f = rng.standard_normal((3, 8, 32))
    a = area_weights(GridSpec.regular(8, 32))
    psd = zonal_psd(f, a)
    w = a.mean(axis=-1) / a.mean(axis=-1).sum()
    ref = np.tensordot(np.mean(f**2, axis=-1), w, axes=([-1], [0]))
    assert np.allclose(psd.sum(axis=-1), ref, rtol=0, atol=1e-8)


def test_psd_single_wave_peak():
    lon = np.arange(32) * 2 * np.pi / 32
    f = np.tile(np.cos(5 * lon), (4, 1))
    psd = zonal_psd(f)
    assert np.argmax(psd) == 5 and psd[5] == pytest.approx(0.5)


def test_histogram_counts():
    x = [-1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0]
    counts = histogram_counts(x, [0.0, 1.0, 2.0])
    assert counts.tolist() == [1, 2, 2, 2]
    assert counts.sum() == len(x)
    with pytest.raises(DataError):
        histogram_counts(x, [1.0, 0.0])


def test_report_roundtrip(tmp_path, rng):
    rep = MetricReport(provenance={"seed": 3})
    ens = rng.standard_normal((3, 2, 2, 4, 4))
    truth = rng.standard_normal((2, 2, 4, 4))
    rep.add_ensemble_scores(ens, truth, np.ones((4, 4)), ["a", "b"], [0.0, 6.0])
    rep.write(tmp_path / "m.csv")
    back = MetricReport.read(tmp_path / "m.csv")
    assert back.rows == rep.rows and back.provenance == {"seed": 3}
    assert back.value("b", 6.0, "crps") == rep.value("b", 6.0, "crps")
    with pytest.raises(DataError):
        rep.add("a", 0, "x", float("nan"))
