"""Finite-difference solver for u_t = Lap^{grad u} u + a u log u + b u on the torus.

Spatial discretisation:
    Du        periodic fourth-order central differences
    grad u    pointwise Legendre transform of Du (zero where F*(Du) < eta)
    div_mu V  exp(-Phi) D(exp(Phi) V)   (conservative, so mass is exact)
Time stepping is explicit RK2 (midpoint) under a diffusive CFL limit.  The
whole time loop is compiled; positivity is checked after every chunk and a
loss of positivity aborts the run instead of clamping.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math

import numpy as np
import jax
import jax.numpy as jnp
from jax import lax
from scipy import optimize

from . import grid
from .errors import (CFLViolation, NoConvergence, NonConvergence, NonPositive,
                     PositivityLost, SnapshotMissing)
from .metric import SpaceConfig, _angle_grid, _g_j, _legendre_closed_j, _unit

U_MIN = 1e-12
CHUNK = 200


# ---------------------------------------------------------------------------
# Compiled grid kernels
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _context(space: SpaceConfig):
    X = space.domain.nodes()
    return (jnp.asarray(X), jnp.asarray(np.exp(space.phi(X))),
            jnp.asarray(space.domain.h1), jnp.asarray(space.domain.h2))


def _grad_j(P, X, Du, eta):
    shp = Du.shape
    v, fs, conv = jax.vmap(_legendre_closed_j, in_axes=(None, 0, 0))(
        P, X.reshape(-1, 2), Du.reshape(-1, 2))
    small = fs < eta
    v = jnp.where(small[:, None], 0.0, v)
    return v.reshape(shp), fs.reshape(shp[:-1]), jnp.all(conv)


def _lap_j(P, X, ephi, h1, h2, u, eta):
    V, fs, ok = _grad_j(P, X, grid.differential(u, h1, h2), eta)
    return grid.weighted_divergence(V, ephi, h1, h2), ok


def _rhs_j(P, X, ephi, h1, h2, u, a, b, eta):
    lap, ok = _lap_j(P, X, ephi, h1, h2, u, eta)
    return lap + a * u * jnp.log(u) + b * u, ok


@jax.jit
def _grad_c(P, X, h1, h2, u, eta):
    return _grad_j(P, X, grid.differential(u, h1, h2), eta)


@jax.jit
def _lap_c(P, X, ephi, h1, h2, u, eta):
    return _lap_j(P, X, ephi, h1, h2, u, eta)


@jax.jit
def _rhs_c(P, X, ephi, h1, h2, u, a, b, eta):
    return _rhs_j(P, X, ephi, h1, h2, u, a, b, eta)


@jax.jit
def _advance(P, X, ephi, h1, h2, u, a, b, eta, dt, nsteps):
    def body(_, state):
        u, ok, umin = state
        k1, ok1 = _rhs_j(P, X, ephi, h1, h2, u, a, b, eta)
        um = u + 0.5 * dt * k1
        k2, ok2 = _rhs_j(P, X, ephi, h1, h2, um, a, b, eta)
        un = u + dt * k2
        return un, ok & ok1 & ok2, jnp.minimum(umin, jnp.minimum(um.min(), un.min()))
    return lax.fori_loop(0, nsteps, body, (u, jnp.asarray(True), u.min()))


def _max_inv_eig_j(P, x, thetas):
    def one(th):
        g = _g_j(P, x, _unit(th))
        tr, det = g[0, 0] + g[1, 1], g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        lam_min = 0.5 * (tr - jnp.sqrt(jnp.maximum(tr ** 2 - 4 * det, 0.0)))
        return 1.0 / lam_min
    return jnp.max(jax.vmap(one)(thetas))


_max_inv_eig_b = jax.jit(jax.vmap(_max_inv_eig_j, in_axes=(None, 0, None)))


# ---------------------------------------------------------------------------
# Spatial operators
# ---------------------------------------------------------------------------

def differential(space: SpaceConfig, u):
    """Du as a covector grid (n1, n2, 2)."""
    d = space.domain
    return grid.differential(np.asarray(u, float), d.h1, d.h2)


def gradient_field(space: SpaceConfig, u, return_norm=False):
    """grad u = L*(Du) at every node; zero where F*(Du) < eta."""
    X, _, h1, h2 = _context(space)
    V, fs, ok = _grad_c(space.params, X, h1, h2, jnp.asarray(u, float), space.eta)
    if not bool(ok):
        raise NonConvergence("Legendre transform failed on the grid")
    return (np.asarray(V), np.asarray(fs)) if return_norm else np.asarray(V)


def divergence_mu(space: SpaceConfig, V):
    """div_mu V = dV^i/dx^i + V^i dPhi/dx^i (conservative discretisation)."""
    _, ephi, h1, h2 = _context(space)
    return np.asarray(grid.weighted_divergence(jnp.asarray(V, float), ephi, h1, h2))


def laplacian(space: SpaceConfig, u):
    """Finsler Laplacian Lap u = div_mu(grad u)."""
    X, ephi, h1, h2 = _context(space)
    lap, ok = _lap_c(space.params, X, ephi, h1, h2, jnp.asarray(u, float), space.eta)
    if not bool(ok):
        raise NonConvergence("Legendre transform failed on the grid")
    return np.asarray(lap)


def _check_positive(u):
    if not np.all(np.asarray(u) > 0):
        raise NonPositive("u must be strictly positive")


def rhs(space: SpaceConfig, u, a, b):
    """Lap u + a u log u + b u."""
    _check_positive(u)
    X, ephi, h1, h2 = _context(space)
    out, ok = _rhs_c(space.params, X, ephi, h1, h2, jnp.asarray(u, float), float(a), float(b),
                     space.eta)
    if not bool(ok):
        raise NonConvergence("Legendre transform failed on the grid")
    return np.asarray(out)


def integrate(space: SpaceConfig, u):
    """Trapezoidal (= rectangle, periodic) quadrature of u against dmu."""
    _, ephi, _, _ = _context(space)
    return float(np.sum(np.asarray(u) * np.asarray(ephi)) * space.domain.cell_area)


def max_inverse_eigenvalue(space: SpaceConfig, n_angles=32, mask=None):
    """Lambda = max over nodes and directions of the largest eigenvalue of g^{-1}."""
    X = space.domain.nodes()
    if mask is not None:
        X = X[np.asarray(mask, bool)]
    X = X.reshape(-1, 2)
    th = jnp.asarray(_angle_grid(space, n_angles))
    return float(np.max(np.asarray(_max_inv_eig_b(space.params, X, th))))


def cfl_limit(space: SpaceConfig, sigma=0.2):
    """Largest admissible step sigma * h^2 / (4 Lambda)."""
    return sigma * space.domain.h ** 2 / (4.0 * max_inverse_eigenvalue(space))


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SolverConfig:
    dt: float
    t_end: float
    cfl: float = 0.2
    u_min: float = U_MIN
    snapshots: tuple = ()
    a: float = 0.0
    b: float = 0.0
    reduce_b: bool = False

    def __post_init__(self):
        if not (0 < self.cfl <= 1):
            raise ValueError("CFL safety factor must lie in (0, 1]")
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        snaps = tuple(float(t) for t in self.snapshots)
        if any(t < 0 or t > self.t_end + 1e-12 for t in snaps):
            raise ValueError("snapshot times must lie in [0, t_end]")
        if any(t2 <= t1 for t1, t2 in zip(snaps, snaps[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        if self.reduce_b and self.a == 0 and self.b != 0:
            raise ValueError("the b-reduction needs a != 0")

    @property
    def times(self):
        snaps = tuple(float(t) for t in self.snapshots)
        if not snaps or snaps[-1] < self.t_end - 1e-12:
            snaps = snaps + (float(self.t_end),)
        return snaps


@dataclasses.dataclass
class Snapshot:
    t: float
    u: np.ndarray
    f: np.ndarray
    F2gradf: np.ndarray
    ft: np.ndarray
    gradnorm_u: np.ndarray    # F*(Du), used to flag degenerate-gradient nodes


@dataclasses.dataclass
class Trajectory:
    snapshots: list
    provenance: str
    a: float
    b: float
    space: SpaceConfig = None
    mass: list = dataclasses.field(default_factory=list)
    steps: int = 0

    @property
    def times(self):
        return [s.t for s in self.snapshots]

    def at(self, t, tol=1e-9):
        for s in self.snapshots:
            if abs(s.t - t) <= tol * max(1.0, abs(t)):
                return s
        raise SnapshotMissing(f"no snapshot at t = {t}")


def provenance_hash(*objs):
    blob = json.dumps([dataclasses.asdict(o) if dataclasses.is_dataclass(o) else o for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cfl_check(space, cfg):
    limit = cfl_limit(space, cfg.cfl)
    if cfg.dt > limit * (1 + 1e-12):
        raise CFLViolation(f"dt = {cfg.dt:.3e} exceeds the CFL bound {limit:.3e}")
    return limit


def _advance_checked(space, u, dt, nsteps, a, b, u_min, t0):
    X, ephi, h1, h2 = _context(space)
    done = 0
    while done < nsteps:
        k = min(CHUNK, nsteps - done)
        u, ok, umin = _advance(space.params, X, ephi, h1, h2, u, a, b, space.eta, dt, k)
        if not bool(ok):
            raise NonConvergence("Legendre transform failed during time stepping")
        if not (float(umin) > u_min) or not bool(jnp.all(jnp.isfinite(u))):
            raise PositivityLost(f"min u fell below {u_min} before t = {t0 + (done + k) * dt:.6g}")
        done += k
    return u


def step(space: SpaceConfig, u, cfg: SolverConfig):
    """One explicit RK2 (midpoint) step of size cfg.dt."""
    _check_positive(u)
    _cfl_check(space, cfg)
    out = _advance_checked(space, jnp.asarray(u, float), cfg.dt, 1, float(cfg.a), float(cfg.b),
                           cfg.u_min, 0.0)
    return np.asarray(out)


def make_snapshot(space, t, u, a, b):
    u = np.asarray(u, float)
    V, fs = gradient_field(space, np.log(u), return_norm=True)
    _, fsu = gradient_field(space, u, return_norm=True)
    return Snapshot(t=float(t), u=u, f=np.log(u), F2gradf=fs ** 2,
                    ft=rhs(space, u, a, b) / u, gradnorm_u=fsu)


def solve(space: SpaceConfig, u0, cfg: SolverConfig) -> Trajectory:
    """March from u0 to t_end, storing snapshots at the requested times.

    Between snapshots the step is shortened uniformly so every snapshot time
    is hit exactly.  With ``reduce_b`` and b != 0 the run integrates the b = 0
    equation for w = exp(b/a) u and maps back, u = exp(-b/a) w.
    """
    u0 = np.asarray(u0, float)
    _check_positive(u0)
    _cfl_check(space, cfg)
    a, b = float(cfg.a), float(cfg.b)
    scale = 1.0
    if cfg.reduce_b and b != 0:
        scale = math.exp(-b / a)
        b_run = 0.0
    else:
        b_run = b
    u = jnp.asarray(u0 / scale)
    t = 0.0
    snaps, mass = [], []
    nsteps_total = 0
    for ts in cfg.times:
        if ts > t:
            n = max(1, math.ceil((ts - t) / cfg.dt - 1e-9))
            u = _advance_checked(space, u, (ts - t) / n, n, a, b_run, cfg.u_min / scale, t)
            nsteps_total += n
            t = ts
        uu = np.asarray(u) * scale
        snaps.append(make_snapshot(space, t, uu, a, b))
        mass.append(integrate(space, uu))
    return Trajectory(snaps, provenance_hash(space, cfg), a, b, space, mass, nsteps_total)


# ---------------------------------------------------------------------------
# Stationary solutions
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class StationaryResult:
    u: np.ndarray
    residual: float               # ||rhs||_inf / ||u||_inf
    history: list                 # residual after each marching chunk / Newton stage
    converged: bool
    steps: int
    method: str


def _rel_residual(space, u, a, b):
    return float(np.max(np.abs(rhs(space, u, a, b))) / np.max(np.abs(u)))


def _project_mean(space, u, shift):
    """Rescale u so that int u (log u + shift) dmu = 0 (exact in one step)."""
    c = -integrate(space, u * (np.log(u) + shift)) / integrate(space, u)
    return math.exp(c) * u


def solve_stationary(space: SpaceConfig, u0, a, b, tol_res=1e-8, max_steps=20000, cfl=1.0,
                     polish=True):
    """Positive solution of Lap u + a u log u + b u = 0.

    Pseudo-time marching (explicit RK2 at the CFL limit) stops once the
    residual reaches tol_res or stalls, after which a Newton-Krylov solve
    polishes it.  For a < 0 the flow contracts onto the constant state.  For
    a > 0 only the mean is unstable (d/dt int u dmu = a int u log u dmu, the
    Laplacian integrates to zero), so after every chunk u is rescaled by the
    positive factor that makes int u log u dmu vanish; the Laplacian is
    1-homogeneous, so a fixed point of march-and-rescale is a stationary
    solution.  Newton alone stalls near constants because the Legendre
    transform is not differentiable at Du = 0 for non-Riemannian metrics.
    """
    if a == 0:
        raise ValueError("stationary solve requires a != 0")
    u = np.asarray(u0, float)
    _check_positive(u)
    history = [_rel_residual(space, u, a, b)]
    steps = 0
    method = "march"
    if history[-1] > tol_res:
        dt = cfl_limit(space, cfl)
        uj = jnp.asarray(u)
        while steps < max_steps:
            k = min(500, max_steps - steps)
            uj = _advance_checked(space, uj, dt, k, float(a), float(b), U_MIN, steps * dt)
            steps += k
            if a > 0:
                uj = jnp.asarray(_project_mean(space, np.asarray(uj), b / a))
            history.append(_rel_residual(space, np.asarray(uj), a, b))
            if history[-1] <= tol_res or history[-1] > 0.9 * history[-2]:
                break
        u = np.asarray(uj)
    if history[-1] > tol_res and polish:
        method = "march+newton" if steps else "newton"
        scale = np.max(np.abs(u))

        def fun(w):
            w = np.maximum(w, 1e-300)
            return rhs(space, w, a, b) / scale

        try:
            u = optimize.newton_krylov(fun, u, f_tol=0.25 * tol_res, maxiter=60,
                                       method="lgmres")
        except optimize.NoConvergence as exc:
            u = np.asarray(exc.args[0]) if exc.args else u
        if np.all(u > 0):
            history.append(_rel_residual(space, u, a, b))
        else:
            history.append(math.inf)
    res = history[-1]
    result = StationaryResult(u, res, history, res <= tol_res and np.all(u > 0), steps, method)
    if not result.converged:
        err = NoConvergence(f"stationary residual {res:.3e} above tolerance {tol_res:.1e}")
        err.result = result
        raise err
    return result
