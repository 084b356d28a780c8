import math

import numpy as np
import pytest
from scipy import integrate

from finslab import DenominatorZero, NonPositive, SpaceConfig, TorusDomain
from finslab import fixtures as fx
from finslab import logsobolev as lsob


def test_energy_quadrature_against_one_dimensional_integral():
    """f = 1 + sin(x1)/2 on the 2 pi torus; E reduces to ratios of 1-D integrals."""
    L = 2 * math.pi
    sp = SpaceConfig(TorusDomain(L, L, 1024, 16))
    X = sp.domain.nodes()
    f = 1 + 0.5 * np.sin(X[..., 0])
    E, rep = lsob.logsobolev_energy(sp, f)
    m = integrate.quad(lambda x: (1 + 0.5 * math.sin(x)) ** 2, 0, L, epsrel=1e-14)[0]
    c2 = L / m                                     # normalisation: int (c f)^2 = L^2
    num = c2 * integrate.quad(lambda x: (0.5 * math.cos(x)) ** 2, 0, L, epsrel=1e-14)[0]
    den = integrate.quad(lambda x: c2 * (1 + 0.5 * math.sin(x)) ** 2
                         * math.log(c2 * (1 + 0.5 * math.sin(x)) ** 2), 0, L, epsrel=1e-14)[0]
    assert E == pytest.approx(num / den, rel=1e-8)
    assert rep["volume"] == pytest.approx(L * L)


def test_energy_scale_invariant_and_degenerate():
    sp = fx.euclidean(32)
    f = 1 + 0.3 * fx.band_limited(sp, 0) / 4
    E = lsob.logsobolev_energy(sp, f)[0]
    for c in (1e-4, 3.0, 1e5):
        assert lsob.logsobolev_energy(sp, c * f)[0] == pytest.approx(E, abs=1e-12)
    with pytest.raises(DenominatorZero):
        lsob.logsobolev_energy(sp, np.full(sp.domain.shape, 2.0))


def test_energy_gradient_matches_directional_derivative():
    sp = fx.randers_constant(32)
    X = sp.domain.nodes()
    f, _ = lsob.normalize(sp, 1 + 0.4 * np.sin(X[..., 0]) + 0.2 * np.cos(X[..., 1]))
    G, E = lsob.energy_gradient(sp, f)
    h = np.cos(X[..., 0] - X[..., 1])
    h = h - lsob.pde.integrate(sp, h * f) / lsob.pde.integrate(sp, f * f) * f    # tangent direction
    eps = 1e-6
    Ep = lsob.logsobolev_energy(sp, f + eps * h)[0]
    Em = lsob.logsobolev_energy(sp, f - eps * h)[0]
    assert (Ep - Em) / (2 * eps) == pytest.approx(lsob.pde.integrate(sp, G * h), rel=1e-5)


def test_euler_lagrange_residual_requires_positive():
    sp = fx.euclidean(16)
    u = np.ones(sp.domain.shape)
    res, sup = lsob.euler_lagrange_residual(sp, u, 0.7)
    assert sup == pytest.approx(0.7)                 # Lap 1 + C log 1 + C = C
    u[0, 0] = -1
    with pytest.raises(NonPositive):
        lsob.euler_lagrange_residual(sp, u, 0.7)


def test_search_decreases_and_bounds_spectral_value():
    sp = fx.euclidean(32)
    X = sp.domain.nodes()
    res = lsob.cfls_search(sp, 1 + 0.5 * np.sin(X[..., 0]), iters=30)
    assert np.all(np.diff(res.history) < 0)
    # the infimum on the flat torus is lambda_1 / 2 = 1/2, approached from above
    assert 0.5 < res.C < res.history[0]
    with pytest.raises(ValueError):
        lsob.cfls_search(sp, np.ones(sp.domain.shape))


def test_preconditioning_beats_plain_descent():
    sp = fx.euclidean(32)
    X = sp.domain.nodes()
    f0 = 1 + 0.5 * np.sin(X[..., 0]) * np.cos(X[..., 1])
    pre = lsob.cfls_search(sp, f0, iters=25)
    plain = lsob.cfls_search(sp, f0, iters=25, precondition=False)
    assert pre.C <= plain.C
