import numpy as np
import pytest

from oracles import central_difference
from wind_kit.core import DataError, GridSpec, area_weights
from wind_kit.datagen import DAM_LEVEL_FACTORS, DAM_LEVELS
from wind_kit.operators import (
    DAMOperator,
    MatrixOperator,
    avgpool_spatial,
    channel_spatial_mean,
    random_mask,
    sparse_mask,
    stack,
    temporal_mean,
)

SHAPE = (4, 3, 8, 16)


def linear_ops(rng):
    mask = rng.uniform(size=SHAPE[2:]) < 0.3
    per_frame = rng.uniform(size=SHAPE) < 0.2
    return {
        "avgpool2": avgpool_spatial(2),
        "avgpool4": avgpool_spatial(4),
        "temporal_mean": temporal_mean(3),
        "sparse_shared": sparse_mask(mask),
        "sparse_per_frame": sparse_mask(per_frame),
        "channel_mean": channel_spatial_mean([0, 2]),
        "channel_mean_window": channel_spatial_mean([1], per_frame=False),
        "channel_mean_weighted": channel_spatial_mean([0], area=area_weights(GridSpec.regular(8, 16))),
        "matrix": MatrixOperator(rng.standard_normal((7, int(np.prod(SHAPE))))),
        "stack": stack([temporal_mean(2), channel_spatial_mean([1])], [2.0, 0.5]),
    }


def adjoint_gap(op, rng):
    u = rng.standard_normal(SHAPE)
    v = rng.standard_normal(op.out_shape(SHAPE))
    lhs = float(np.sum(op.apply(u) * v))
    rhs = float(np.sum(u * op.vjp(u, v)))
    return abs(lhs - rhs) / max(1.0, abs(lhs))


@pytest.mark.parametrize("name", list(linear_ops(np.random.default_rng(0))))
def test_adjoint_probe(name):
    rng = np.random.default_rng(11)
    op = linear_ops(np.random.default_rng(0))[name]
    assert max(adjoint_gap(op, rng) for _ in range(20)) <= 1e-10
    u = rng.standard_normal(SHAPE)
    assert np.allclose(op.jvp(rng.standard_normal(SHAPE), u), op.apply(u), atol=0)


def test_avgpool_examples(rng):
    x = np.full((1, 1, 4, 4), 3.25)
    assert np.allclose(avgpool_spatial(2).apply(x), 3.25)
    blk = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert avgpool_spatial(2).apply(blk)[0, 0, 0, 0] == 2.5
    op = avgpool_spatial(4)
    u = rng.standard_normal((1, 1, 8, 8))
    v = rng.standard_normal((1, 1, 2, 2))
    assert abs(np.sum(op.apply(u) * v) - np.sum(u * op.vjp(u, v))) <= 1e-12
    # A A^T = identity / s^2 on the coarse grid
    assert np.allclose(op.apply(op.vjp(u, v)) * 16, v, atol=1e-12)
    with pytest.raises(DataError):
        avgpool_spatial(3).apply(np.zeros((1, 1, 8, 8)))


def test_temporal_mean_examples():
    x = np.stack([np.full((1, 2, 2), v) for v in (0.0, 2.0, 4.0, 6.0, 100.0)])
    assert np.allclose(temporal_mean(4).apply(x), 3.0)
    same = np.repeat(np.arange(4.0).reshape(1, 1, 2, 2), 3, axis=0)
    assert np.allclose(temporal_mean(3).apply(same), same[0])
    with pytest.raises(DataError):
        temporal_mean(6).apply(x)
    g = temporal_mean(4).vjp(x, np.ones((1, 2, 2)))
    assert np.allclose(g[:4], 0.25) and np.all(g[4] == 0)


def test_sparse_mask_examples(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.array_equal(sparse_mask(np.ones((4, 4))).apply(x), x.ravel())
    m = random_mask((32, 64), 0.01, rng)
    assert m.sum() == round(0.01 * 2048)
    op = sparse_mask(m)
    assert op.out_shape((1, 1, 32, 64)) == (round(0.01 * 2048),)
    with pytest.raises(DataError, match="no observations"):
        sparse_mask(np.zeros((4, 4)))
    # restricted to observed entries, apply after scatter is the identity
    y = rng.standard_normal(op.out_shape((2, 1, 32, 64)))
    assert np.array_equal(op.apply(op.vjp(np.zeros((2, 1, 32, 64)), y)), y)


def test_channel_mean_examples():
    x = np.full((2, 3, 4, 5), 280.0)
    assert np.allclose(channel_spatial_mean([1]).apply(x), 280.0)
    lat = np.broadcast_to(np.arange(4.0)[:, None], (4, 5))
    x = np.broadcast_to(lat, (1, 1, 4, 5))
    assert channel_spatial_mean([0]).apply(x)[0, 0] == pytest.approx(1.5)
    with pytest.raises(DataError):
        channel_spatial_mean([])
    with pytest.raises(DataError):
        channel_spatial_mean([5]).apply(np.zeros((1, 2, 2, 2)))


def test_stack_examples(rng):
    x = rng.standard_normal(SHAPE)
    op = temporal_mean(2)
    single = stack([op], [1.0])
    assert np.array_equal(single.apply(x), op.apply(x).ravel())
    both = stack([temporal_mean(2), channel_spatial_mean([0])])
    assert both.apply(x).size == np.prod(op.out_shape(SHAPE)) + SHAPE[0]


# ------------------------------------------------------------------ dry air mass


def _dam_setup(rng, H=4, W=8):
    grid = GridSpec.regular(H, W)
    mean = np.array([285.0, 0.0, 0.0, 0.006, 0.0, 101325.0])
    std = np.array([10.0, 5.0, 5.0, 0.003, 0.5, 300.0])
    op = DAMOperator(
        phi_sfc=9.80665 * rng.uniform(0, 2000, (H, W)),
        area=area_weights(grid),
        mslp_channel=5,
        t2m_channel=0,
        q_channel=3,
        levels=DAM_LEVELS,
        level_factors=DAM_LEVEL_FACTORS,
        mean=mean,
        std=std,
    )
    return op, rng.standard_normal((3, 6, H, W))


def test_dam_flat_atmosphere():
    op = DAMOperator(
        phi_sfc=np.zeros((1, 1)),
        area=np.ones((1, 1)),
        mslp_channel=0,
        t2m_channel=1,
        q_channel=2,
        levels=DAM_LEVELS,
        level_factors=DAM_LEVEL_FACTORS,
        mean=[101325.0, 288.0, 0.0],
        std=[1.0, 1.0, 1.0],
    )
    f = op.apply(np.zeros((2, 3, 1, 1)))
    assert np.allclose(f, 10332.27452799886, rtol=1e-12)


def test_dam_humidity_lowers_mass(rng):
    op, x = _dam_setup(rng)
    base = op.apply(x)
    wetter = x.copy()
    wetter[:, 3] = (2 * (x[:, 3] * 0.003 + 0.006) - 0.006) / 0.003
    assert np.all(op.apply(wetter) < base)
    assert np.all(op.vjp(x, np.ones(3))[:, 3] <= 0)


def test_dam_jvp_vjp_vs_finite_differences(rng):
    op, x = _dam_setup(rng)
    for _ in range(5):
        u = rng.standard_normal(x.shape)
        fd = central_difference(op.apply, x, u, 1e-3)
        an = op.jvp(x, u)
        assert np.max(np.abs(an - fd) / np.abs(fd)) < 1e-4
        v = rng.standard_normal(3)
        assert np.sum(an * v) == pytest.approx(np.sum(u * op.vjp(x, v)), rel=1e-12)


def test_dam_missing_channels(rng):
    op, x = _dam_setup(rng)
    with pytest.raises(DataError, match="missing channels"):
        op.apply(x[:, :4])
