"""Acceptance suite: the twelve criteria at their stated tolerances.

Every test records its measured quantities through the ``acceptance``
fixture; the terminal summary prints one PASS/FAIL line per criterion.
Reference runs are 128 x 128 on the 2 pi torus unless stated otherwise.
"""

import math
import time

import numpy as np
import pytest

from finslab import fixtures as fx
from finslab import estimates as est
from finslab import logsobolev as lsob
from finslab import pde
from finslab.curvature import (bound_scan, chern_coefficients, chern_riemann, flag_curvature,
                               reference_field, s_curvature, spray, tau_tensor)
from finslab.geodesics import ball_mask, distance_field
from finslab.metric import (cartan_tensor, dual_norm, eval_F, fundamental_tensor,
                            global_misalignment, legendre_transform)

pytestmark = pytest.mark.slow

L = fx.L
P_CENTER = (64, 64)
R_LOCAL = L / 5


@pytest.fixture(scope="module")
def randers_scan():
    return bound_scan(fx.randers_varying(), N=4, stride=4)


@pytest.fixture(scope="module")
def local_setups():
    """Per run: ball-scan bounds over B_p(2R) and the measured K0 proxy."""
    out = {}
    for name, space, traj, a in (("near-heat", fx.euclidean(), fx.near_heat_run(), 1e-6),
                                 ("randers", fx.randers_varying(), fx.randers_run(), -0.5)):
        big = ball_mask(space, P_CENTER, 2 * R_LOCAL)
        scan = bound_scan(space, region=(P_CENTER, 2 * R_LOCAL), N=4, reference="grad_r", stride=2)
        K0 = 0.0
        if not space.riemannian:
            W = reference_field(space, "grad_r", p=P_CENTER, region_mask=big)
            for s in traj.snapshots:
                if s.t >= 0.05:
                    V = pde.gradient_field(space, s.u)
                    K0 = max(K0, tau_tensor(space, V, W, mask=big).max_norm)
        params = est.CheckParams(beta=1.5, delta=0.9, N=4, K=scan.K_lower, A=max(scan.A_upper, 1.0),
                                 K0=K0, R=R_LOCAL, p=P_CENTER, a=a)
        out[name] = (traj, params)
    return out


# ---------------------------------------------------------------------------
# 1. metric layer
# ---------------------------------------------------------------------------

def test_c01_metric_layer(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    n = 10_000
    worst = dict(pd=np.inf, euler=0.0, cartan=0.0, legendre=0.0, homog=0.0)
    for make in (fx.conformal, fx.randers_constant, fx.randers_varying):
        sp = make(64)
        x = rng.uniform(0, L, (n, 2))
        v = rng.standard_normal((n, 2))
        g = fundamental_tensor(sp, x, v)
        F = eval_F(sp, x, v)
        worst["pd"] = min(worst["pd"], np.linalg.eigvalsh(g)[:, 0].min())
        gvv = np.einsum("ni,nij,nj->n", v, g, v)
        worst["euler"] = max(worst["euler"], np.max(np.abs(gvv - F ** 2) / F ** 2))
        C = cartan_tensor(sp, x, v)
        worst["cartan"] = max(worst["cartan"], np.abs(np.einsum("nijk,nk->nij", C, v)).max())
        xi = rng.standard_normal((n, 2))
        w = legendre_transform(sp, x, xi)
        back = np.einsum("nij,nj->ni", fundamental_tensor(sp, x, w), w)
        worst["legendre"] = max(worst["legendre"],
                                np.max(np.linalg.norm(back - xi, axis=1) / np.linalg.norm(xi, axis=1)))
        worst["legendre"] = max(worst["legendre"], np.max(np.abs(eval_F(sp, x, w) - dual_norm(sp, x, xi))))
        lam = rng.uniform(0.1, 10.0, n)
        worst["homog"] = max(worst["homog"],
                             np.max(np.abs(eval_F(sp, x, lam[:, None] * v) - lam * F) / (lam * F)))
    dt = time.time() - t0
    ok = (worst["pd"] > 0 and worst["euler"] <= 1e-5 and worst["cartan"] <= 1e-5
          and worst["legendre"] <= 1e-8 and worst["homog"] <= 1e-10 and dt < 30)
    acceptance.record(1, "metric layer", ok,
                      f"min eig g={worst['pd']:.3g} Euler={worst['euler']:.2e} C.v={worst['cartan']:.2e} "
                      f"Legendre={worst['legendre']:.2e} homog={worst['homog']:.2e} time={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Riemannian reduction (conformal fixture)
# ---------------------------------------------------------------------------

def test_c02_riemannian_reduction(acceptance):
    eps = 0.05
    sp = fx.conformal(128, eps)
    rng = np.random.default_rng(7)
    x = rng.uniform(0, L, (100, 2))
    v = rng.standard_normal((100, 2))
    u = rng.standard_normal((100, 2))
    lam = eps * np.sin(x[:, 0]) * np.sin(x[:, 1])
    dlam = np.stack([eps * np.cos(x[:, 0]) * np.sin(x[:, 1]), eps * np.sin(x[:, 0]) * np.cos(x[:, 1])], -1)
    I = np.eye(2)
    christoffel = (np.einsum("ij,nk->nijk", I, dlam) + np.einsum("ik,nj->nijk", I, dlam)
                   - np.einsum("jk,ni->nijk", I, dlam))
    chern_err = np.abs(chern_coefficients(sp, x, v).Gamma - christoffel).max()
    K = flag_curvature(sp, x, v, u)
    K_exact = -np.exp(-2 * lam) * (-2 * lam)          # -e^{-2 lam} Lap lam, Lap lam = -2 lam
    flag_err = np.max(np.abs(K - K_exact)) / np.max(np.abs(K_exact))
    A = global_misalignment(sp)
    cartan = np.abs(cartan_tensor(sp, x, v)).max()
    ok = chern_err <= 1e-5 and flag_err <= 1e-3 and abs(A - 1) <= 1e-6 and cartan <= 1e-6
    acceptance.record(2, "Riemannian reduction", ok,
                      f"Chern-Christoffel={chern_err:.2e} flag rel={flag_err:.2e} "
                      f"misalignment-1={A - 1:.2e} Cartan={cartan:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. flat non-Riemannian reduction (constant Randers drift)
# ---------------------------------------------------------------------------

def test_c03_flat_randers(acceptance):
    sp = fx.randers_constant(128)
    rng = np.random.default_rng(11)
    x = rng.uniform(0, L, (200, 2))
    v = rng.standard_normal((200, 2))
    G = np.abs(spray(sp, x, v)).max()
    R = np.abs(chern_riemann(sp, x, v)).max()
    S, Sdot = s_curvature(sp, x, v)
    S = max(np.abs(S).max(), np.abs(Sdot).max())
    h = sp.domain.h1
    ratios = []
    for (i, j) in ((20, 40), (64, 64), (90, 10)):
        for k in (8, 16, 24):
            fwd = distance_field(sp, (i, j)).r[i + k, j]
            bwd = distance_field(sp, (i + k, j)).r[i, j]
            ratios.append(fwd / bwd)
            assert fwd == pytest.approx(1.3 * k * h, rel=1e-9)
    rel = max(abs(r / (1.3 / 0.7) - 1) for r in ratios)
    ok = G <= 5e-6 and R <= 5e-6 and S <= 5e-6 and rel <= 0.02
    acceptance.record(3, "flat Randers", ok,
                      f"|G|={G:.2e} |R|={R:.2e} |S|={S:.2e} distance ratio rel err={rel:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. solver validation
# ---------------------------------------------------------------------------

def test_c04_solver_validation(acceptance):
    t0 = time.time()
    sp = fx.euclidean(128)
    X = sp.domain.nodes()
    times = (0.25, 0.5, 1.0)
    cfg = pde.SolverConfig(dt=pde.cfl_limit(sp, 0.5), t_end=1.0, cfl=0.5, snapshots=(0.0,) + times)
    tr = pde.solve(sp, 2 + np.sin(X[..., 0]), cfg)
    amp0 = np.fft.fft2(tr.snapshots[0].u)[1, 0]
    decay = max(abs(abs(np.fft.fft2(tr.at(t).u)[1, 0] / amp0) / math.exp(-(2 * math.pi / L) ** 2 * t) - 1)
                for t in times)
    mass = max(abs(m / tr.mass[0] - 1) for m in tr.mass)
    a, b, u0 = -0.5, 0.5, 1.5
    trc = pde.solve(sp, np.full(sp.domain.shape, u0), pde.SolverConfig(dt=1e-4, t_end=1.0, a=a, b=b))
    exact = math.exp(math.exp(a) * (math.log(u0) + b / a) - b / a)
    ode = np.max(np.abs(trc.snapshots[-1].u / exact - 1))
    dt = time.time() - t0
    ok = decay <= 0.01 and mass <= 1e-8 and ode <= 1e-6 and dt < 120
    acceptance.record(4, "solver validation", ok,
                      f"mode decay rel={decay:.2e} mass drift={mass:.2e} constant-data ODE rel={ode:.2e} "
                      f"time={dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. log-transformed identity on the Randers run
# ---------------------------------------------------------------------------

def test_c05_log_identity(acceptance):
    tr = fx.randers_run()
    sp = tr.space
    worst = 0.0
    for s in tr.snapshots:
        lap = pde.laplacian(sp, s.f)
        terms = (tr.a * s.f, s.F2gradf, s.ft)
        scale = max(1.0, max(np.abs(t).max() for t in terms))
        worst = max(worst, np.max(np.abs(-lap - (tr.a * s.f + s.F2gradf - s.ft))) / scale)
    ok = worst <= 5e-3
    acceptance.record(5, "log identity", ok, f"max |-Lap f - (af + F^2 - f_t)|/scale = {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 6. compact Li-Yau estimate
# ---------------------------------------------------------------------------

def test_c06_liyau_compact(acceptance, randers_scan):
    heat = est.liyau_compact_check(fx.near_heat_run(), est.CheckParams(beta=1.5, N=4, K=0, a=1e-6))
    rand = est.liyau_compact_check(fx.randers_run(),
                                   est.CheckParams(beta=1.5, N=4, K=randers_scan.K_lower, a=-0.5))
    ok = heat.passed and rand.passed
    acceptance.record(6, "Li-Yau compact", ok,
                      f"near-heat max rel violation={heat.max_violation:.3e}, randers (K={randers_scan.K_lower:.4g})"
                      f" max rel violation={rand.max_violation:.3e} (tol 1e-2)")
    assert ok


# ---------------------------------------------------------------------------
# 7. local Li-Yau estimate
# ---------------------------------------------------------------------------

def test_c07_liyau_local_runs(acceptance, local_setups):
    parts = []
    ok = True
    for name, (traj, params) in local_setups.items():
        rep = est.liyau_local_check(traj, params)
        ok &= rep.passed
        parts.append(f"{name} (K={params.K:.4g}, A={params.A:.4g}, K0={params.K0:.4g}) "
                     f"max rel violation={rep.max_violation:.3e}")
    acceptance.record(7, "Li-Yau local", ok, "; ".join(parts))
    assert ok


def _limit_ratio_error(R):
    p = est.CheckParams(beta=1.5, delta=0.9, N=4, K=0, A=1, K0=0, R=R)
    cut = est.cutoff_profile()
    return max(abs(est.local_rhs(p, t, cut) / (est.compact_rhs(p, t) / p.delta) - 1)
               for t in (0.05, 0.1, 0.5, 1.0))


def test_c07_formula_limit_converges_as_inverse_square(acceptance):
    """The cut-off terms are O(1/R^2): R^2 * error is constant as R grows."""
    Rs = [10 * L, 100 * L, 1000 * L, 10000 * L]
    errs = [_limit_ratio_error(R) for R in Rs]
    scaled = [e * R ** 2 for e, R in zip(errs, Rs)]
    ok = all(abs(s / scaled[-1] - 1) < 1e-2 for s in scaled) and errs[-1] < 1e-6
    acceptance.record(7, "Li-Yau local", ok,
                      "limit error at R=10L..1e4L: " + ", ".join(f"{e:.2e}" for e in errs)
                      + f" (R^2 * error = {scaled[-1]:.4g})")
    assert ok


@pytest.mark.xfail(strict=True, reason="cut-off terms are O(1/R^2); at R = 10L the RHS ratio is off "
                                        "by about 3%, far above 1e-6 (see the decision ledger)")
def test_c07_formula_limit_at_ten_periods(acceptance):
    err = _limit_ratio_error(10 * L)
    acceptance.record(7, "Li-Yau local", err <= 1e-6,
                      f"literal limit check at R=10L: rel error {err:.3e} > 1e-6 (unattainable, O(1/R^2))")
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# 8. Harnack inequality
# ---------------------------------------------------------------------------

def test_c08_harnack(acceptance, randers_scan):
    runs = (("near-heat", fx.near_heat_run(), est.CheckParams(beta=1.5, N=4, K=0, a=1e-6)),
            ("randers", fx.randers_run(), est.CheckParams(beta=1.5, N=4, K=randers_scan.K_lower, a=-0.5)))
    parts, ok = [], True
    for name, traj, params in runs:
        rep = est.harnack_check(traj, params, est.random_pairs(traj, 20, seed=1))
        ok &= rep.passed
        parts.append(f"{name} max log-margin={rep.max_violation:.3e}")

    # constant solution, x1 = x2, close times: margin = (b/a)(e^{-a t2} - e^{-a t1}) - Theta
    sp = fx.euclidean(32)
    a, b = -0.5, 0.5
    tr = pde.solve(sp, np.full(sp.domain.shape, 1.5),
                   pde.SolverConfig(dt=1e-3, t_end=0.2, a=a, b=b, snapshots=(0.1, 0.1001, 0.2)))
    params = est.CheckParams(beta=1.5, N=4, K=0, a=a, b=b)
    rep = est.harnack_check(tr, params, [((3, 3), 0.1, (3, 3), 0.1001)])
    ok &= rep.max_violation <= 1e-6
    parts.append(f"constant-solution degenerate pair margin={rep.max_violation:.3e}")

    # Theta closed form for a = 0, K = 0
    p0 = est.CheckParams(beta=1.5, N=4, K=0, a=0.0)
    worst = 0.0
    for t1, t2, d in ((0.05, 1.0, 0.0), (0.1, 0.3, 2.0), (0.2, 0.25, 0.7)):
        exact = 0.5 * p0.N * p0.beta * (math.log(t2 / t1) + d ** 2 / (2 * p0.N * (t2 - t1)))
        worst = max(worst, abs(est.harnack_theta(p0, t1, t2, d) / exact - 1))
    ok &= worst <= 1e-8
    parts.append(f"Theta closed-form rel err={worst:.2e}")
    acceptance.record(8, "Harnack", ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 9. gap and boundedness of stationary solutions
# ---------------------------------------------------------------------------

def test_c09_gap_and_boundedness(acceptance):
    params = est.CheckParams(N=4, a=-0.5, b=0.5, K=0, A=1)
    disc, bm, bp = est.gap_roots(params)
    feasible = not est.gap_feasibility(params)
    parts = [f"feasible={feasible} disc={disc:.6g} beta0=({bm:.6g}, {bp:.6g})"]
    ok = feasible and abs(disc - 1) <= 1e-12 and bp > 1

    sp = fx.euclidean(64)
    X = sp.domain.nodes()
    u0 = math.e + 0.3 * np.sin(X[..., 0]) * np.cos(2 * X[..., 1])
    res = pde.solve_stationary(sp, u0, params.a, params.b, tol_res=1e-8)
    rep = est.gap_check(sp, res.u, params)
    ok &= res.residual <= 1e-8 and res.u.min() >= 1 - 1e-3 and rep.passed
    parts.append(f"stationary residual={res.residual:.2e} min u={res.u.min():.6g}")

    const = np.full(sp.domain.shape, math.exp(-params.b / params.a))
    cres = np.max(np.abs(pde.rhs(sp, const, params.a, params.b))) / const.max()
    ok &= cres <= 1e-10
    parts.append(f"exact constant residual={cres:.1e}")

    spr = fx.randers_constant(64)
    p4 = est.CheckParams(N=4, a=0.5, b=0.0, K=0)
    res4 = pde.solve_stationary(spr, 1 + 0.1 * np.cos(X[..., 0]) * np.sin(X[..., 1]), p4.a, 0.0,
                                max_steps=200_000)
    rep4 = est.gap_check(spr, res4.u, p4)
    ok &= res4.u.max() <= math.exp(p4.N / 4) + 1e-3 and rep4.passed
    parts.append(f"boundedness branch max u={res4.u.max():.6g} <= e^(N/4)={math.exp(1):.6g}")
    acceptance.record(9, "gap/boundedness", ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 10. Bochner inequality
# ---------------------------------------------------------------------------

def test_c10_bochner(acceptance):
    worst, ok = -np.inf, True
    for name, make in fx.FAMILIES.items():
        sp = make(128)
        for seed in range(5):
            rep = est.bochner_check(sp, fx.band_limited(sp, seed), N=4, tol=1e-3)
            ok &= rep.passed
            worst = max(worst, rep.max_violation)
    sp = fx.euclidean(128)
    X = sp.domain.nodes()
    T = est.bochner_terms(sp, np.sin(X[..., 0]), N=4)
    exact = np.sin(X[..., 0]) ** 2 * (1 - 1 / 4)         # |Hess u|^2 - (Lap u)^2 / N
    closed = np.abs(T["residual"] - exact)[T["valid"]].max()
    ok &= closed <= 1e-6
    acceptance.record(10, "Bochner", ok,
                      f"worst -residual/scale over 4 fixtures x 5 functions={worst:.3e} (tol 1e-3); "
                      f"euclidean closed-form err={closed:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 11. Laplacian comparison
# ---------------------------------------------------------------------------

def test_c11_comparison(acceptance):
    sp = fx.euclidean(128)
    T = est.comparison_terms(sp, P_CENTER, None, R_LOCAL)
    parts, ok = [], True
    for N in (3.0, 4.0):
        rep = est.comparison_check(sp, P_CENTER, None,
                                   est.CheckParams(N=N, R=R_LOCAL, p=P_CENTER, tol_cmp=0.0), sd=T["smooth"])
        ok &= rep.max_violation <= 0
        parts.append(f"euclidean N={N:g} margin={rep.max_violation:.3e}")
    sc = fx.conformal(128)
    scan = bound_scan(sc, region=(P_CENTER, R_LOCAL + 6 * sc.domain.h), N=4, reference="grad_r", stride=2)
    rep = est.comparison_check(sc, P_CENTER, None,
                               est.CheckParams(N=4, R=R_LOCAL, p=P_CENTER, K=scan.K_lower, A=scan.A_upper))
    ok &= rep.passed
    parts.append(f"conformal (K={scan.K_lower:.4g}) margin={rep.max_violation:.3e}, excluded={rep.excluded}")
    acceptance.record(11, "Laplacian comparison", ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 12. log-Sobolev search
# ---------------------------------------------------------------------------

def test_c12_logsobolev(acceptance):
    sp = fx.euclidean(128)
    X = sp.domain.nodes()
    f0 = 1 + 0.5 * np.sin(X[..., 0])
    res = lsob.cfls_search(sp, f0, iters=60)
    d = np.diff(res.history)
    strict = int(np.argmax(d >= 0)) if np.any(d >= 0) else len(d)
    _, sup = lsob.euler_lagrange_residual(sp, res.el_profile, res.C)
    E1, _ = lsob.logsobolev_energy(sp, f0)
    inv = max(abs(lsob.logsobolev_energy(sp, c * f0)[0] - E1) for c in (1e-3, 0.5, 7.0, 1e4))
    ok = strict >= 10 and sup <= 1e-3 and inv <= 1e-12
    acceptance.record(12, "log-Sobolev", ok,
                      f"strict decreases={strict} C={res.C:.6g} EL sup-residual={sup:.2e} "
                      f"rescaling change={inv:.1e}")
    assert ok
