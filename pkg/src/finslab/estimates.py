"""Pointwise evaluation of the gradient estimates and their consequences.

Every check is a pure function of solver output (or a test function) and a
parameter set.  It returns a :class:`CheckReport` whose ``max_violation`` is
compared against the check's tolerance: the report passes iff
``max_violation <= tol``.

Quantities (f = log u, F^2 = F^2(grad f), alpha = max(a/2, -a/4)):

    Li-Yau LHS   F^2 + beta a f + beta b - beta f_t
    compact RHS  (N beta^2 / 2) (1/t + alpha + K / (2(beta - 1)))
    local RHS    (N beta^2 / (2 delta)) (1/t + alpha + A K / (2(beta - 1))
                     + N beta^2 c1^2 / (16 (1 - delta)(beta - 1) R^2) + B/2)
    B            (2 c1^2 A + c2 A) / R^2 + c1 (C(N,A)(1 + R sqrt(l)) + c0 R) / R^2
                 with C(N,A) = N + (A - 1) n - A, l = K / C(N,A), c0 = sqrt(A) K0

The Li-Yau checks are relative: max_violation = max (LHS - RHS) / RHS.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import jax
import jax.numpy as jnp

from . import grid, pde
from .curvature import curvature_sample
from .errors import (BadInterval, BadN, BetaOutOfRange, ConditionsInfeasible,
                     ProfileInvalid)
from .geodesics import ball_mask, distance_field, smooth_distance
from .metric import (SpaceConfig, _F_batch, _dual_closed_j, _g_batch, _g_j, _inv2,
                     _legendre_closed_j, _phi_j, batched)

_dual_b = jax.jit(jax.vmap(_dual_closed_j, in_axes=(None, 0, 0)))

DIM = 2


# ---------------------------------------------------------------------------
# Parameters, cut-off profile and reports
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class CheckParams:
    beta: float = 1.5
    delta: float = 0.9
    N: float = 4.0
    K: float = 0.0
    A: float = 1.0
    K0: float = 0.0
    R: float = 1.0
    p: tuple = (0, 0)
    a: float = 0.0
    b: float = 0.0
    t_min: float = 0.05
    tol_liyau: float = 1e-2
    tol_harnack: float = 1e-2
    tol_gap: float = 1e-3
    tol_bochner: float = 1e-3
    tol_cmp: float = 5e-2

    def __post_init__(self):
        if not self.beta > 1:
            raise BetaOutOfRange(f"beta must exceed 1 (got {self.beta})")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1) (got {self.delta})")
        if not self.N > DIM:
            raise BadN(f"N must exceed the dimension {DIM} (got {self.N})")
        if self.K < 0 or self.K0 < 0:
            raise ValueError("K and K0 must be nonnegative")
        if self.A < 1:
            raise ValueError("the misalignment bound A is at least 1")
        if not (self.R > 0 and self.t_min > 0):
            raise ValueError("R and t_min must be positive")

    @property
    def alpha(self):
        return max(self.a / 2, -self.a / 4)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclasses.dataclass
class CutoffProfile:
    c1: float
    c2: float
    d: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    ddphi: np.ndarray

    @property
    def min_ratio(self):
        pos = self.phi > 0
        return float(np.min(self.dphi[pos] / np.sqrt(self.phi[pos])))

    @property
    def min_second(self):
        return float(np.min(self.ddphi))


def _cos2_profile(d):
    s = np.clip(d - 1.0, 0.0, 1.0)
    inside = (d >= 1) & (d <= 2)
    phi = np.where(d < 1, 1.0, np.where(d > 2, 0.0, np.cos(np.pi * s / 2) ** 2))
    dphi = np.where(inside, -0.5 * np.pi * np.sin(np.pi * s), 0.0)
    ddphi = np.where(inside, -0.5 * np.pi ** 2 * np.cos(np.pi * s), 0.0)
    return phi, dphi, ddphi


def cutoff_profile(profile=None, c1=math.pi, c2=math.pi ** 2 / 2, n=10000, tol=1e-9):
    """Tabulate and validate the cut-off phi on [0, 2].

    The default is phi(d) = cos^2(pi (d - 1) / 2) on [1, 2] (one on [0, 1],
    zero beyond 2); its second derivative is taken one-sided at d = 1.
    ``profile`` may be any callable d -> (phi, phi', phi'').
    """
    d = np.linspace(0.0, 2.0, n + 1)
    phi, dphi, ddphi = (_cos2_profile if profile is None else profile)(d)
    phi, dphi, ddphi = (np.asarray(a, float) for a in (phi, dphi, ddphi))
    prof = CutoffProfile(float(c1), float(c2), d, phi, dphi, ddphi)
    if np.any(phi < -tol) or np.any(phi > 1 + tol):
        raise ProfileInvalid("phi must take values in [0, 1]")
    if np.any(np.abs(phi[d <= 1] - 1) > tol) or abs(phi[-1]) > tol:
        raise ProfileInvalid("phi must equal 1 on [0, 1] and vanish at 2")
    pos = phi > 0
    ratio = dphi[pos] / np.sqrt(phi[pos])
    if np.any(ratio > tol) or np.any(ratio < -c1 - tol):
        raise ProfileInvalid(f"phi'/sqrt(phi) leaves [-c1, 0] (min {ratio.min():.6g})")
    if np.any(ddphi < -c2 - tol):
        raise ProfileInvalid(f"phi'' < -c2 (min {ddphi.min():.6g})")
    return prof


@dataclasses.dataclass
class CheckReport:
    name: str
    passed: bool
    max_violation: float          # compared against tol; positive means LHS above RHS
    margin: float                 # LHS - RHS at the argmax, in natural units
    argmax: tuple                 # (x, t) of the worst point; t is None for static checks
    tol: float
    params: dict
    excluded: int
    details: dict = dataclasses.field(default_factory=dict)
    rows: list = dataclasses.field(default_factory=list)   # per-snapshot / per-pair table

    def verdict(self):
        x, t = self.argmax
        xs = "(" + ",".join(f"{c:.6g}" for c in x) + ")" if x is not None else "-"
        ts = f"{t:.6g}" if t is not None else "-"
        return (f"{self.name} pass={int(self.passed)} max_violation={self.max_violation:.6e} "
                f"margin={self.margin:.6e} argmax_x={xs} argmax_t={ts}")


def _report(name, viol, margin, argmax, tol, params, excluded, details=None, rows=None):
    viol = float(viol)
    return CheckReport(name, bool(viol <= tol), viol, float(margin), argmax, tol,
                       dataclasses.asdict(params) if dataclasses.is_dataclass(params) else params,
                       int(excluded), details or {}, rows or [])


# ---------------------------------------------------------------------------
# Li-Yau quantities
# ---------------------------------------------------------------------------

def _snap(traj, t):
    if not t > 0:
        raise ValueError("t must be positive")
    return traj.at(t)


def liyau_lhs(snap, params):
    """F^2(grad f) + beta (a f + b - f_t) on the grid."""
    return snap.F2gradf + params.beta * (params.a * snap.f + params.b - snap.ft)


def H_field(traj, t, params):
    """H = t (F^2(grad f) + beta (a f - f_t)) in the b-reduced variables.

    With log w = f + b/a this is t times the Li-Yau left-hand side in the
    original variables, so the b term is carried explicitly.
    """
    s = _snap(traj, t)
    return s.t * liyau_lhs(s, params)


def J_field(traj, t, params):
    """The lower bound J of the parabolic operator applied to H."""
    s = _snap(traj, t)
    H = s.t * liyau_lhs(s, params)
    F2, beta, N, a = s.F2gradf, params.beta, params.N, params.a
    inner = -H / (beta * s.t) - (1 - 1 / beta) * F2
    return s.t * ((2 / N) * inner ** 2 + ((beta - 1) * a - 2 * params.K) * F2) - a * H - H / s.t


def compact_rhs(params, t):
    p = params
    return 0.5 * p.N * p.beta ** 2 * (1 / t + p.alpha + p.K / (2 * (p.beta - 1)))


def comparison_constant(N, A):
    """C(N, A) = N + (A - 1) n - A in dimension n = 2."""
    return N + (A - 1) * DIM - A


def _coth_term(l, r):
    """sqrt(l) coth(sqrt(l) r), with the l -> 0 limit 1/r."""
    r = np.asarray(r, float)
    x = math.sqrt(l) * r
    with np.errstate(divide="ignore", invalid="ignore"):
        big = math.sqrt(l) / np.tanh(np.where(x > 0, x, 1.0))
    small = (1 + x ** 2 / 3 - x ** 4 / 45) / r
    return np.where(x < 1e-3, small, big)


def cutoff_constant_B(params, cutoff: CutoffProfile):
    """The constant B bounding 2F^2(grad Psi) - Lap Psi for Psi = phi(r / R)."""
    p = params
    C = comparison_constant(p.N, p.A)
    l = p.K / C
    c0 = math.sqrt(p.A) * p.K0
    c1, c2, R = cutoff.c1, cutoff.c2, p.R
    return (2 * c1 ** 2 * p.A + c2 * p.A) / R ** 2 + c1 / R ** 2 * (C * (1 + R * math.sqrt(l)) + c0 * R)


def local_rhs(params, t, cutoff: CutoffProfile):
    p = params
    c1, R = cutoff.c1, p.R
    B = cutoff_constant_B(p, cutoff)
    extra = p.N * p.beta ** 2 * c1 ** 2 / (16 * (1 - p.delta) * (p.beta - 1) * R ** 2)
    return (p.N * p.beta ** 2 / (2 * p.delta)) * (
        1 / t + p.alpha + p.A * p.K / (2 * (p.beta - 1)) + extra + B / 2)


def local_constant_summary(params, cutoff: CutoffProfile):
    """B/2 next to the statement's (2c1^2 + c2)A/(2R^2) + c3 (1 + R + R sqrt K)/(2R^2) form."""
    p = params
    B = cutoff_constant_B(p, cutoff)
    head = (2 * cutoff.c1 ** 2 + cutoff.c2) * p.A / (2 * p.R ** 2)
    rest = B / 2 - head
    c3 = rest * 2 * p.R ** 2 / (1 + p.R + p.R * math.sqrt(p.K))
    return {"B": B, "B_half": B / 2, "cutoff_part": head, "c3_implied": c3}


def _liyau_scan(traj, params, rhs_fn, mask, name, tol):
    X = traj.space.domain.nodes()
    eta = traj.space.eta
    worst = (-math.inf, 0.0, None, None)
    rows = []
    excluded = 0
    degenerate = 0
    for s in traj.snapshots:
        n_here = int(mask.sum())
        if s.t < params.t_min:
            excluded += n_here
            continue
        lhs = liyau_lhs(s, params)
        rhs = rhs_fn(s.t)
        rel = np.where(mask, (lhs - rhs) / rhs, -np.inf)
        degenerate += int((mask & (s.gradnorm_u < eta)).sum())
        k = np.unravel_index(int(np.argmax(rel)), rel.shape)
        rows.append({"t": s.t, "rhs": float(rhs), "max_lhs": float(lhs[mask].max()),
                     "max_rel_violation": float(rel[k]), "i": k[0], "j": k[1]})
        if rel[k] > worst[0]:
            worst = (float(rel[k]), float(lhs[k] - rhs), tuple(X[k]), s.t)
    if worst[2] is None:
        raise ValueError("no snapshot at or after t_min")
    return _report(name, worst[0], worst[1], (worst[2], worst[3]), tol, params, excluded,
                   {"degenerate_gradient_nodes": degenerate}, rows)


def liyau_compact_check(traj, params: CheckParams):
    """Theorem-1.1 inequality at every node and snapshot with t >= t_min."""
    mask = np.ones(traj.space.domain.shape, bool)
    rep = _liyau_scan(traj, params, lambda t: compact_rhs(params, t), mask,
                      "liyau_compact", params.tol_liyau)
    rep.details.update(argmax_H_diagnostic(traj, params))
    return rep


def liyau_local_check(traj, params: CheckParams, cutoff: CutoffProfile | None = None):
    """Local (ball) inequality on B_p(R) using the cut-off constant B."""
    cutoff = cutoff or cutoff_profile()
    space = traj.space
    ball_mask(space, params.p, 2 * params.R)          # B_p(2R) must not wrap
    mask = ball_mask(space, params.p, params.R)
    rep = _liyau_scan(traj, params, lambda t: local_rhs(params, t, cutoff), mask,
                      "liyau_local", params.tol_liyau)
    rep.details.update(local_constant_summary(params, cutoff))
    rep.details["ball_nodes"] = int(mask.sum())
    return rep


def argmax_H_diagnostic(traj, params):
    """J at the space-time argmax of H over snapshots with t >= t_min."""
    best = None
    for s in traj.snapshots:
        if s.t < params.t_min:
            continue
        H = s.t * liyau_lhs(s, params)
        k = np.unravel_index(int(np.argmax(H)), H.shape)
        if best is None or H[k] > best[0]:
            best = (float(H[k]), s.t, k)
    if best is None:
        return {}
    H, t, k = best
    J = J_field(traj, t, params)[k]
    return {"H_max": H, "H_argmax_t": t, "H_argmax_node": tuple(int(i) for i in k),
            "J_at_H_argmax": float(J)}


# ---------------------------------------------------------------------------
# Harnack inequality
# ---------------------------------------------------------------------------

def _theta_integrand(params, d, dt, local=False, cutoff=None):
    p = params
    if not local:
        const = p.alpha + p.K / (2 * (p.beta - 1)) + d ** 2 / (2 * p.N * dt ** 2) - 2 * p.b / (p.beta * p.N)
        pref = p.N * p.beta / 2
    else:
        cutoff = cutoff or cutoff_profile()
        B = cutoff_constant_B(p, cutoff)
        const = (p.alpha + p.A * p.K / (2 * (p.beta - 1)) + p.delta * d ** 2 / (2 * p.N * dt ** 2)
                 - 2 * p.delta * p.b / (p.N * p.beta)
                 + p.N * p.beta ** 2 * cutoff.c1 ** 2 / (16 * (1 - p.delta) * (p.beta - 1) * p.R ** 2)
                 + B / 2)
        pref = p.N * p.beta / (2 * p.delta)
    return lambda tau: pref * np.exp(-p.a * tau) * (1 / tau + const)


def _simpson(f, t1, t2, n):
    x = np.linspace(t1, t2, n + 1)
    y = f(x)
    return (t2 - t1) / (3 * n) * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())


def harnack_theta(params: CheckParams, t1, t2, d, local=False, cutoff=None, panels=1024,
                  rtol=1e-8, return_error=False):
    """Theta = integral over [t1, t2] of the Harnack integrand (composite Simpson).

    The error is estimated by Richardson, |S_n - S_{n/2}| / 15; the panel
    count is doubled until it falls below rtol |Theta|.
    """
    if not (0 < t1 < t2):
        raise BadInterval(f"need 0 < t1 < t2 (got t1={t1}, t2={t2})")
    f = _theta_integrand(params, float(d), t2 - t1, local, cutoff)
    n = panels
    while True:
        S = _simpson(f, t1, t2, n)
        err = abs(S - _simpson(f, t1, t2, n // 2)) / 15
        if err <= rtol * max(abs(S), 1e-300) or n >= 1 << 20:
            break
        n *= 2
    return (S, err) if return_error else S


def random_pairs(traj, n=20, seed=0, t_min=0.05):
    """Deterministic random space-time pairs ((i1, j1), t1, (i2, j2), t2), t1 < t2."""
    times = [t for t in traj.times if t >= t_min]
    if len(times) < 2:
        raise ValueError("need at least two snapshots at or after t_min")
    rng = np.random.default_rng(seed)
    n1, n2 = traj.space.domain.shape
    out = []
    for _ in range(n):
        k1, k2 = sorted(rng.choice(len(times), size=2, replace=False))
        x1 = (int(rng.integers(n1)), int(rng.integers(n2)))
        x2 = (int(rng.integers(n1)), int(rng.integers(n2)))
        out.append((x1, times[k1], x2, times[k2]))
    return out


def harnack_check(traj, params: CheckParams, pairs, local=False, cutoff=None):
    """log-margin  e^{-a t1} f(x1, t1) - e^{-a t2} f(x2, t2) - Theta  per pair.

    d(x2, x1) is the lattice distance from x2 to x1.  The variant with f(x1)
    read at t2 instead of t1 is reported as ``margin_t2`` in each row.
    """
    space = traj.space
    a = params.a
    fields = {}
    rows = []
    worst = None
    for x1, t1, x2, t2 in pairs:
        s1, s2 = traj.at(t1), traj.at(t2)
        x1, x2 = tuple(x1), tuple(x2)
        if x2 not in fields:
            fields[x2] = distance_field(space, x2).r
        d = float(fields[x2][x1])
        theta = harnack_theta(params, t1, t2, d, local, cutoff)
        lhs = math.exp(-a * t1) * s1.f[x1]
        rhs = math.exp(-a * t2) * s2.f[x2] + theta
        m = float(lhs - rhs)
        m2 = float(math.exp(-a * t1) * s2.f[x1] - rhs)
        rows.append({"i1": x1[0], "j1": x1[1], "t1": t1, "i2": x2[0], "j2": x2[1], "t2": t2,
                     "distance": d, "theta": theta, "margin": m, "margin_t2": m2})
        if worst is None or m > worst[0]:
            worst = (m, x1, t1)
    X = space.domain.nodes()
    return _report("harnack" + ("_local" if local else ""), worst[0], worst[0],
                   (tuple(X[worst[1]]), worst[2]), params.tol_harnack, params, 0,
                   {"pairs": len(rows), "max_margin_t2": max(r["margin_t2"] for r in rows)}, rows)


# ---------------------------------------------------------------------------
# Gap and boundedness of stationary solutions
# ---------------------------------------------------------------------------

def gap_roots(params: CheckParams):
    """Discriminant and roots beta0^- <= beta0^+ of
    2 N alpha beta^2 - (2 N alpha + 4 b - N A K) beta + 4 b = 0."""
    p = params
    N, al, AK = p.N, p.alpha, p.A * p.K
    disc = (N * AK - 4 * p.b - 2 * N * al) ** 2 - 32 * N * p.b * al
    if disc < 0:
        return disc, math.nan, math.nan
    lin = 4 * p.b + 2 * N * al - N * AK
    sq = math.sqrt(disc)
    return disc, (lin - sq) / (4 * N * al), (lin + sq) / (4 * N * al)


def gap_feasibility(params: CheckParams):
    """Check n < N < 2b/alpha and 0 <= AK <= 4b/N + 2 alpha - 4 sqrt(2 b alpha / N).

    Returns a list of the violated inequalities (empty if feasible).
    """
    p = params
    al = p.alpha
    bad = []
    if p.a == 0:
        return ["a != 0"]
    if not p.N > DIM:
        bad.append(f"n < N ({DIM} < {p.N})")
    if not p.N < 2 * p.b / al:
        bad.append(f"N < 2b/alpha ({p.N} < {2 * p.b / al:.6g})")
    AK = p.A * p.K
    upper = 4 * p.b / p.N + 2 * al - 4 * math.sqrt(max(2 * p.b * al / p.N, 0.0))
    if not 0 <= AK <= upper + 1e-15:
        bad.append(f"0 <= AK <= 4b/N + 2alpha - 4sqrt(2b alpha/N) ({AK:.6g} vs {upper:.6g})")
    return bad


def beta_scan(params: CheckParams, beta_max=100.0, step=1e-3):
    """Betas in (1, beta_max] where (N beta^2/2)(alpha + AK/(2(beta-1))) <= beta b."""
    p = params
    beta = 1 + step * np.arange(1, int(round((beta_max - 1) / step)) + 1)
    g = 0.5 * p.N * beta ** 2 * (p.alpha + p.A * p.K / (2 * (beta - 1))) - beta * p.b
    ok = g <= 0
    if not ok.any():
        return None
    return float(beta[ok].min()), float(beta[ok].max())


def gap_check(space: SpaceConfig, u, params: CheckParams):
    """Lower (a < 0) or upper (a > 0) bound of a positive stationary solution.

    b = 0 and K = 0 selects the boundedness branch with bound e^{-N/8}
    (a < 0) or e^{N/4} (a > 0); otherwise the feasibility conditions are
    checked first (ConditionsInfeasible names the failed inequality) and the
    bound is 1.  The pointwise estimate F^2(grad f) + beta0 a f <= 0 is
    reported as a diagnostic.
    """
    p = params
    u = np.asarray(u, float)
    if p.a == 0:
        raise ConditionsInfeasible("the gap estimate needs a != 0")
    if np.any(u <= 0):
        raise ValueError("stationary solution must be positive")
    details = {}
    if p.b == 0 and p.K == 0:
        branch = "boundedness"
        bound = math.exp(-p.N / 8) if p.a < 0 else math.exp(p.N / 4)
        betas = []
    else:
        branch = "gap"
        bad = gap_feasibility(p)
        if bad:
            raise ConditionsInfeasible("violated: " + "; ".join(bad))
        disc, bm, bp = gap_roots(p)
        details.update(discriminant=disc, beta0_minus=bm, beta0_plus=bp,
                       beta0_exceeds_1=bool(bp > 1), beta0_minus_exceeds_1=bool(bm > 1))
        scan = beta_scan(p)
        details["beta_scan"] = scan
        bound = 1.0
        betas = [b for b in (bm, bp) if b > 1]
    f = np.log(u)
    _, fs = pde.gradient_field(space, f, return_norm=True)
    if betas:
        details["stationary_estimate_max"] = max(float(np.max(fs ** 2 + b0 * p.a * f)) for b0 in betas)
    X = space.domain.nodes()
    if p.a < 0:
        k = np.unravel_index(int(np.argmin(u)), u.shape)
        margin = bound - u[k]
    else:
        k = np.unravel_index(int(np.argmax(u)), u.shape)
        margin = u[k] - bound
    details.update(branch=branch, bound=bound, min_u=float(u.min()), max_u=float(u.max()))
    return _report("gap", margin, margin, (tuple(X[k]), None), p.tol_gap, p, 0, details)


# ---------------------------------------------------------------------------
# Bochner formula and Laplacian comparison
# ---------------------------------------------------------------------------

def _raise_with(space, X, V, covec, ok):
    """g_V^{-1} covec at nodes where ok; zero elsewhere."""
    Vs = np.where(ok[..., None], V, np.array([1.0, 0.0]))
    g = batched(_g_batch, space.params, X, Vs)
    out = np.linalg.solve(g, covec[..., None])[..., 0]
    return np.where(ok[..., None], out, 0.0)


def _bochner_j(P, x, xi, H, T):
    """Pointwise Lap^{grad u} h, Lap u and D(Lap u)(grad u) from the 3-jet of u.

    Along x + y the differential is modelled by its Taylor polynomial
    xi + H y + T[y, y]/2, which reproduces every derivative of Du that the
    three quantities need at y = 0; the rest is automatic differentiation.
    """
    H = H.reshape(2, 2)
    T = T.reshape(2, 2, 2)
    y0 = jnp.zeros(2)

    def xi_at(y):
        return xi + H @ y + 0.5 * jnp.einsum("ijk,j,k->i", T, y, y)

    def V_at(y):
        return _legendre_closed_j(P, x + y, xi_at(y))[0]

    def h_at(y):
        return 0.5 * _dual_closed_j(P, x + y, xi_at(y)) ** 2

    def W_at(y):
        return _inv2(_g_j(P, x + y, V_at(y))) @ jax.grad(h_at)(y)

    def dphi(y):
        return jax.grad(_phi_j, 1)(P, x + y)

    def lapu_at(y):
        return jnp.trace(jax.jacfwd(V_at)(y)) + V_at(y) @ dphi(y)

    V = V_at(y0)
    lap_h = jnp.trace(jax.jacfwd(W_at)(y0)) + W_at(y0) @ dphi(y0)
    return {"V": V, "lap_h": lap_h, "lap_u": lapu_at(y0), "cross": jax.grad(lapu_at)(y0) @ V}


_bochner_b = jax.jit(jax.vmap(_bochner_j, in_axes=(None, 0, 0, 0, 0)))


def bochner_terms(space: SpaceConfig, u, N=math.inf, method="spectral"):
    """Grids of every term of the Bochner inequality for the function u.

    residual = Lap^{grad u}(F^2(grad u)/2) - D(Lap u)(grad u) - Ric^N(grad u) - (Lap u)^2/N
    Nodes with F(grad u) <= eta are marked invalid.

    method='spectral' differentiates the trigonometric interpolant of u
    exactly (FFT) and applies the chain rule pointwise, so band-limited u
    carries no truncation error.  method='fd' nests the fourth-order
    differences of the solver; it degrades next to critical points of u,
    where F*^2(Du) is only C^{1,1} for non-Riemannian metrics.
    """
    d = space.domain
    u = np.asarray(u, float)
    X = d.nodes()
    if method == "spectral":
        Du, D2, D3 = grid.spectral_jet(u, d.L1, d.L2)
        fs = batched(_dual_b, space.params, X, Du)
        ok = fs > space.eta
        xi = np.where(ok[..., None], Du, np.array([1.0, 0.0]))
        out = batched(_bochner_b, space.params, X, xi, D2.reshape(d.shape + (4,)),
                      D3.reshape(d.shape + (8,)))
        V = np.where(ok[..., None], out["V"], 0.0)
        lap_h, lap_u, cross = (np.where(ok, out[k], 0.0) for k in ("lap_h", "lap_u", "cross"))
    elif method == "fd":
        V, fs = pde.gradient_field(space, u, return_norm=True)
        ok = fs > space.eta
        h = 0.5 * fs ** 2
        Dh = grid.differential(h, d.h1, d.h2)
        lap_h = pde.divergence_mu(space, _raise_with(space, X, V, Dh, ok))
        lap_u = pde.divergence_mu(space, V)
        Dlap = grid.differential(lap_u, d.h1, d.h2)
        cross = np.sum(Dlap * V, axis=-1)
    else:
        raise ValueError(f"unknown method {method!r}")
    ric = np.zeros(d.shape)
    idx = np.argwhere(ok)
    for i in range(0, len(idx), 16384):
        sl = idx[i:i + 16384]
        cs = curvature_sample(space, X[sl[:, 0], sl[:, 1]], V[sl[:, 0], sl[:, 1]], N=N)
        ric[sl[:, 0], sl[:, 1]] = cs.RicN
    dim_term = np.zeros(d.shape) if math.isinf(N) else lap_u ** 2 / N
    residual = lap_h - cross - ric - dim_term
    return {"lap_h": lap_h, "cross": cross, "ric": ric, "dim_term": dim_term,
            "lap_u": lap_u, "residual": residual, "valid": ok}


def bochner_check(space: SpaceConfig, u, N=math.inf, tol=1e-3, params=None, method="spectral"):
    """Pointwise Bochner inequality residual >= -tol * scale, scale = max(1, |terms|)."""
    T = bochner_terms(space, u, N, method)
    ok = T["valid"]
    scale = np.maximum.reduce([np.ones(space.domain.shape), np.abs(T["lap_h"]),
                               np.abs(T["cross"]), np.abs(T["ric"]), T["dim_term"]])
    viol = np.where(ok, -T["residual"] / scale, -np.inf)
    k = np.unravel_index(int(np.argmax(viol)), viol.shape)
    X = space.domain.nodes()
    echo = params if params is not None else {"N": N, "tol_bochner": tol}
    return _report("bochner", viol[k], -T["residual"][k], (tuple(X[k]), None), tol, echo,
                   int((~ok).sum()),
                   {"min_residual": float(T["residual"][ok].min()) if ok.any() else math.nan})


def _cross_spread(bad):
    """Nodes whose nested fourth-order stencil (|a|<=4,|b|<=2 or |a|<=2,|b|<=4) meets ``bad``."""
    out = bad.copy()
    for a in range(-4, 5):
        for b in range(-4, 5):
            if (abs(a) <= 4 and abs(b) <= 2) or (abs(a) <= 2 and abs(b) <= 4):
                out |= np.roll(np.roll(bad, a, 0), b, 1)
    return out


def comparison_terms(space: SpaceConfig, p, V=None, R=None, sd=None):
    """Lap^V r for the smooth distance from p, with the exclusion mask.

    The distance is refined on B_p(R + 6h) (or the whole torus if R is None);
    nodes are included if they lie in B_p(R), r >= 2h, the nested stencil
    avoids invalid or nonsmooth nodes, and F(V) > eta.  Nonsmooth nodes are
    those where the five-point Laplacian of the refined distance exceeds ten
    times its median over the refined region (the source itself excepted).
    """
    d = space.domain
    X = d.nodes()
    df = distance_field(space, p)
    if R is not None:
        ball_mask(space, p, R, field=df)
        region = ball_mask(space, p, R + 6 * d.h, field=df)
        inside = df.r < R
    else:
        region = np.ones(d.shape, bool)
        inside = region
    if sd is None:
        sd = smooth_distance(space, p, mask=region, field=df)
    r = sd.r
    Vf = sd.grad if V is None else np.asarray(V, float)
    FV = batched(_F_batch, space.params, X, Vf)
    okV = FV > space.eta
    # spikes of the refined distance's Laplacian mark the cut locus; the lattice
    # distance itself is faceted and cannot be used for this
    lap5 = np.abs(grid.laplacian5(r, d.h1, d.h2))
    core = sd.valid & ~_cross_spread(~sd.valid)
    ref = np.median(lap5[core]) if core.any() else np.inf
    nonsmooth = lap5 > 10 * ref
    bad = ~sd.valid | (nonsmooth & (r >= 2 * d.h)) | ~okV
    include = inside & ~_cross_spread(bad) & (r >= 2 * d.h)
    Dr = grid.differential(r, d.h1, d.h2)
    lap_r = pde.divergence_mu(space, _raise_with(space, X, Vf, Dr, okV))
    return {"r": r, "lap_r": lap_r, "include": include, "inside": inside, "smooth": sd,
            "nonsmooth": nonsmooth}


def comparison_rhs(params: CheckParams, r):
    C = comparison_constant(params.N, params.A)
    return C * _coth_term(params.K / C, r) + math.sqrt(params.A) * params.K0


def comparison_check(space: SpaceConfig, p, V=None, params: CheckParams = None, sd=None):
    """Lap^V r - (C(N,A) sqrt(l) coth(sqrt(l) r) + sqrt(A) K0) over included nodes of B_p(R)."""
    params = params or CheckParams(p=tuple(p))
    T = comparison_terms(space, p, V, params.R, sd)
    inc = T["include"]
    if not inc.any():
        raise ValueError("no node survives the comparison exclusions")
    rhs = comparison_rhs(params, np.where(inc, T["r"], 1.0))
    m = np.where(inc, T["lap_r"] - rhs, -np.inf)
    k = np.unravel_index(int(np.argmax(m)), m.shape)
    X = space.domain.nodes()
    return _report("comparison", m[k], m[k], (tuple(X[k]), None), params.tol_cmp, params,
                   int((T["inside"] & ~inc).sum()), {"included": int(inc.sum())})
