import math

import numpy as np
import pytest

from finslab import (FourierMode, InvalidSpec, MetricSpec, SpaceConfig, TorusDomain, ZeroVector,
                     cartan_tensor, dual_norm, eval_F, fundamental_tensor, legendre_transform,
                     misalignment)
from finslab import fixtures as fx


def test_domain_nodes_and_wrap():
    d = TorusDomain(2.0, 3.0, 16, 24)
    X = d.nodes()
    assert X.shape == (16, 24, 2)
    assert d.h1 == pytest.approx(2.0 / 16) and d.h2 == pytest.approx(3.0 / 24)
    assert np.allclose(d.wrap([2.5, -0.5]), [0.5, 2.5])
    assert d.node_index(X[3, 5]) == (3, 5)


def test_euclidean_is_flat_norm():
    sp = fx.euclidean(32)
    rng = np.random.default_rng(0)
    x, v = rng.uniform(0, 6, (50, 2)), rng.standard_normal((50, 2))
    assert np.allclose(eval_F(sp, x, v), np.linalg.norm(v, axis=1), atol=1e-14)
    assert np.allclose(fundamental_tensor(sp, x, v), np.eye(2), atol=1e-13)
    assert np.abs(cartan_tensor(sp, x, v)).max() < 1e-13


def test_randers_constant_drift_closed_form():
    sp = fx.randers_constant(32, drift=(0.3, -0.2))
    rng = np.random.default_rng(1)
    x, v = rng.uniform(0, 6, (50, 2)), rng.standard_normal((50, 2))
    exact = np.linalg.norm(v, axis=1) + v @ np.array([0.3, -0.2])
    assert np.allclose(eval_F(sp, x, v), exact, rtol=1e-13)


def test_dual_norm_matches_brute_force_maximum():
    """F*(xi) = max over the indicatrix of xi(v), by dense angular sampling."""
    sp = fx.randers_varying(32)
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 2 * math.pi, (20, 2))
    xi = rng.standard_normal((20, 2))
    th = np.linspace(0, 2 * math.pi, 20001)
    e = np.stack([np.cos(th), np.sin(th)], -1)
    for k in range(20):
        F = eval_F(sp, np.broadcast_to(x[k], e.shape), e)
        brute = np.max(e @ xi[k] / F)
        assert dual_norm(sp, x[k], xi[k]) == pytest.approx(brute, rel=1e-7)


def test_legendre_transform_is_dual_pairing():
    sp = fx.randers_varying(32)
    rng = np.random.default_rng(3)
    x, xi = rng.uniform(0, 6, (100, 2)), rng.standard_normal((100, 2))
    v = legendre_transform(sp, x, xi)
    fs = dual_norm(sp, x, xi)
    assert np.allclose(np.sum(xi * v, axis=1), fs ** 2, rtol=1e-10)
    assert np.allclose(eval_F(sp, x, v), fs, rtol=1e-10)


def test_cartan_matches_finite_differences_of_g():
    sp = fx.randers_varying(32)
    x, v = np.array([1.1, 2.3]), np.array([0.4, -0.9])
    h = 1e-5
    C = cartan_tensor(sp, x, v)
    for k in range(2):
        dv = np.zeros(2)
        dv[k] = h
        dg = (fundamental_tensor(sp, x, v + dv) - fundamental_tensor(sp, x, v - dv)) / (2 * h)
        assert np.allclose(C[:, :, k], 0.5 * dg, atol=1e-8)


def test_zero_reference_vector_raises():
    sp = fx.conformal(32)
    with pytest.raises(ZeroVector):
        fundamental_tensor(sp, [0.0, 0.0], [0.0, 0.0])


def test_drift_norm_validated():
    with pytest.raises(InvalidSpec):
        SpaceConfig(TorusDomain(), MetricSpec.randers((0.95, 0.2)))
    with pytest.raises(InvalidSpec):
        MetricSpec("euclidean", drift=(FourierMode(0.1), FourierMode()))


def test_misalignment_riemannian_and_monotone():
    x = np.array([0.7, 1.9])
    assert misalignment(fx.conformal(32), x) == pytest.approx(1.0, abs=1e-10)
    sp = fx.randers_constant(32)
    a64, a128 = misalignment(sp, x, 64), misalignment(sp, x, 128)
    assert a64 > 1.0
    assert a128 >= a64
    with pytest.raises(ValueError):
        misalignment(sp, x, 32)
