import math

import numpy as np
import pytest
from scipy import integrate

from finslab import (BadInterval, BadN, BetaOutOfRange, ConditionsInfeasible, ProfileInvalid)
from finslab import estimates as est
from finslab import fixtures as fx
from finslab import pde


def test_params_validation():
    with pytest.raises(BetaOutOfRange):
        est.CheckParams(beta=1.0)
    with pytest.raises(BadN):
        est.CheckParams(N=2.0)
    with pytest.raises(ValueError):
        est.CheckParams(delta=1.0)
    with pytest.raises(ValueError):
        est.CheckParams(A=0.5)
    assert est.CheckParams(a=-0.4).alpha == pytest.approx(0.1)
    assert est.CheckParams(a=0.4).alpha == pytest.approx(0.2)


def test_cutoff_profile():
    prof = est.cutoff_profile()
    assert prof.min_ratio >= -math.pi - 1e-9
    assert prof.min_second >= -math.pi ** 2 / 2 - 1e-9
    with pytest.raises(ProfileInvalid):
        est.cutoff_profile(c1=2.0)          # cos^2 needs c1 = pi
    with pytest.raises(ProfileInvalid):
        est.cutoff_profile(lambda d: (np.maximum(1 - d / 2, 0), -0.5 + 0 * d, 0 * d))


def test_comparison_rhs_limits():
    assert est.comparison_constant(4, 1) == 3
    # K -> 0: C sqrt(l) coth(sqrt(l) r) -> C / r
    p = est.CheckParams(N=4, K=1e-12)
    r = np.array([0.1, 1.0, 2.0])
    assert np.allclose(est.comparison_rhs(p, r), 3 / r, rtol=1e-9)
    p = est.CheckParams(N=4, K=3.0)
    assert np.allclose(est.comparison_rhs(p, r), 3 / np.tanh(r), rtol=1e-12)


def test_compact_rhs_formula():
    p = est.CheckParams(beta=2.0, N=4, K=1.0, a=-0.8)
    assert est.compact_rhs(p, 0.5) == pytest.approx(0.5 * 4 * 4 * (2 + 0.2 + 0.5))


def test_local_rhs_tends_to_compact_over_delta():
    cut = est.cutoff_profile()
    base = est.CheckParams(N=4, K=0.0, A=1.0, K0=0.0)
    errs = [abs(est.local_rhs(base.replace(R=R), 0.3, cut) / (est.compact_rhs(base, 0.3) / base.delta) - 1)
            for R in (10.0, 100.0)]
    assert errs[1] == pytest.approx(errs[0] / 100, rel=1e-3)


def test_harnack_theta_against_quad():
    p = est.CheckParams(beta=1.7, N=3.5, K=0.4, a=-0.6, b=0.3)
    t1, t2, d = 0.1, 0.8, 1.3
    const = p.alpha + p.K / (2 * (p.beta - 1)) + d ** 2 / (2 * p.N * (t2 - t1) ** 2) - 2 * p.b / (p.beta * p.N)
    ref, _ = integrate.quad(lambda s: p.N * p.beta / 2 * math.exp(-p.a * s) * (1 / s + const), t1, t2,
                            epsabs=0, epsrel=1e-13)
    val, err = est.harnack_theta(p, t1, t2, d, return_error=True)
    assert val == pytest.approx(ref, rel=1e-9)
    assert err < 1e-8 * abs(val)
    with pytest.raises(BadInterval):
        est.harnack_theta(p, 0.5, 0.5, d)


def test_gap_roots_against_polynomial_roots():
    p = est.CheckParams(N=3, a=-0.4, b=0.9, K=0.05, A=1.2)
    disc, bm, bp = est.gap_roots(p)
    coeffs = [2 * p.N * p.alpha, -(2 * p.N * p.alpha + 4 * p.b - p.N * p.A * p.K), 4 * p.b]
    assert sorted(np.roots(coeffs).real) == pytest.approx([bm, bp], rel=1e-12)
    assert not est.gap_feasibility(p)
    lo, hi = est.beta_scan(p)
    assert lo == pytest.approx(max(bm, 1), abs=2e-3) and hi == pytest.approx(bp, abs=2e-3)


def test_gap_infeasible_raises():
    sp = fx.euclidean(16)
    p = est.CheckParams(N=4, a=-0.5, b=0.1)
    assert est.gap_feasibility(p)
    with pytest.raises(ConditionsInfeasible):
        est.gap_check(sp, np.ones(sp.domain.shape), p)


def test_liyau_on_spatially_constant_solution():
    """For constant data F^2 = 0 and f_t = a f + b, so the left side vanishes."""
    sp = fx.euclidean(16)
    a, b = -0.5, 0.3
    tr = pde.solve(sp, np.full(sp.domain.shape, 1.7),
                   pde.SolverConfig(dt=1e-3, t_end=0.5, a=a, b=b, snapshots=(0.1, 0.3)))
    p = est.CheckParams(a=a, b=b)
    lhs = est.liyau_lhs(tr.at(0.3), p)
    assert np.abs(lhs).max() < 1e-10
    rep = est.liyau_compact_check(tr, p)
    assert rep.passed and rep.max_violation == pytest.approx(-1.0, abs=1e-10)
    assert "J_at_H_argmax" in rep.details


def test_random_pairs_deterministic_and_ordered():
    sp = fx.euclidean(16)
    tr = pde.solve(sp, fx.bump_initial(sp), pde.SolverConfig(dt=pde.cfl_limit(sp, 0.5), t_end=0.3,
                                                             cfl=0.5, snapshots=(0.05, 0.1, 0.2)))
    a, b = est.random_pairs(tr, 8, seed=4), est.random_pairs(tr, 8, seed=4)
    assert a == b
    assert all(t1 < t2 for _, t1, _, t2 in a)
    rep = est.harnack_check(tr, est.CheckParams(N=4), a)
    assert rep.passed and len(rep.rows) == 8


def test_bochner_spectral_and_fd_agree_on_smooth_riemannian_case():
    sp = fx.conformal(64)
    u = fx.band_limited(sp, 1)
    Ts = est.bochner_terms(sp, u, N=4)
    Tf = est.bochner_terms(sp, u, N=4, method="fd")
    ok = Ts["valid"] & Tf["valid"]
    scale = np.abs(Ts["lap_h"]).max()
    assert np.abs(Ts["residual"] - Tf["residual"])[ok].max() < 1e-2 * scale
    with pytest.raises(ValueError):
        est.bochner_terms(sp, u, method="other")


def test_bochner_euclidean_closed_form():
    sp = fx.euclidean(32)
    X = sp.domain.nodes()
    u = np.sin(X[..., 0]) * np.cos(X[..., 1])
    T = est.bochner_terms(sp, u, N=math.inf)
    hess2 = 2 * (np.sin(X[..., 0]) * np.cos(X[..., 1])) ** 2 + 2 * (np.cos(X[..., 0]) * np.sin(X[..., 1])) ** 2
    assert np.abs(T["residual"] - hess2)[T["valid"]].max() < 1e-10


def test_comparison_euclidean_distance_laplacian():
    sp = fx.euclidean(64)
    p = (32, 32)
    T = est.comparison_terms(sp, p, None, 1.2)
    inc = T["include"]
    assert inc.sum() > 100
    assert np.abs(T["r"] * T["lap_r"] - 1)[inc].max() < 0.05
