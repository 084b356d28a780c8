"""Geodesics, exponential map, forward distance fields and forward balls.

Forward distance is computed by Dijkstra's algorithm on a periodic lattice
graph whose directed edges carry the Finsler length F(x_mid, dx) of the
lattice displacement dx.  For analysis that needs a *smooth* distance (its
Laplacian, its gradient), ``smooth_distance`` refines the graph distance by
solving the two-point boundary problem exp_p(t u_theta) = x with Newton's
method, warm-started from the Dijkstra path direction.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import jax
import jax.numpy as jnp
from jax import lax
from scipy import sparse
from scipy.sparse import csgraph

from . import grid
from .curvature import _geodesic_rhs, _rk4
from .errors import BallWraps, GeodesicFailure, ZeroVector
from .metric import SpaceConfig, _F_j, _F_batch, _inv2, _unit, batched, eval_F

SPEED_DRIFT_TOL = 1e-4
STENCIL_RADIUS = 4
NEWTON_STEPS = 32       # RK4 steps per shot in the smooth-distance solver
NEWTON_ITERS = 12


@dataclasses.dataclass
class GeodesicPath:
    times: np.ndarray        # (k,)
    points: np.ndarray       # (k, 2), unwrapped coordinates
    velocities: np.ndarray   # (k, 2)

    @property
    def speeds(self):
        return self._speeds

    def endpoint(self, domain=None):
        p = self.points[-1]
        return p if domain is None else domain.wrap(p)


def _scan_path(P, y0, dt, steps):
    def body(y, _):
        k1 = _geodesic_rhs(P, y)
        k2 = _geodesic_rhs(P, y + 0.5 * dt * k1)
        k3 = _geodesic_rhs(P, y + 0.5 * dt * k2)
        k4 = _geodesic_rhs(P, y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return y, y
    _, ys = lax.scan(body, y0, None, length=steps)
    return jnp.concatenate([y0[None], ys])


_scan_path_jit = jax.jit(_scan_path, static_argnums=3)


def geodesic_shoot(space: SpaceConfig, x0, v0, T=1.0, steps=None) -> GeodesicPath:
    """Integrate x'' + 2G(x, x') = 0 with classical RK4 over [0, T]."""
    x0 = np.asarray(x0, float)
    v0 = np.asarray(v0, float)
    F0 = eval_F(space, x0, v0)
    if F0 <= space.eta:
        raise ZeroVector("initial velocity is zero")
    min_steps = math.ceil(16 * abs(T) * F0 / space.domain.h)
    if steps is None:
        steps = max(min_steps, 16)
    elif steps < min_steps:
        raise ValueError(f"steps must be >= 16 T F(v0)/h = {min_steps}")
    dt = T / steps
    ys = np.asarray(_scan_path_jit(space.params, jnp.concatenate([x0, v0]), dt, int(steps)))
    path = GeodesicPath(np.linspace(0.0, T, steps + 1), ys[:, :2], ys[:, 2:])
    speeds = batched(_F_batch, space.params, path.points, path.velocities)
    path._speeds = speeds
    drift = np.max(np.abs(speeds - F0)) / F0
    if drift > SPEED_DRIFT_TOL * max(1.0, abs(T)):
        raise GeodesicFailure(f"speed drift {drift:.2e} exceeds tolerance")
    return path


def exp_map(space: SpaceConfig, x, v, steps=None):
    """exp_x(v): endpoint of the geodesic with initial velocity v at time 1."""
    x = np.asarray(x, float)
    if eval_F(space, x, v) <= space.eta:
        return space.domain.wrap(x)
    return geodesic_shoot(space, x, v, 1.0, steps).endpoint(space.domain)


# ---------------------------------------------------------------------------
# Lattice distance
# ---------------------------------------------------------------------------

def stencil(radius=STENCIL_RADIUS):
    """Primitive lattice offsets (i, j) with max(|i|, |j|) <= radius.

    radius 1 gives the 8 king moves, radius 2 the 16-neighbour king+knight
    stencil, radius 4 a 48-neighbour stencil (max anisotropy ~0.8%).
    """
    out = [(i, j) for i in range(-radius, radius + 1) for j in range(-radius, radius + 1)
           if (i, j) != (0, 0) and math.gcd(abs(i), abs(j)) == 1]
    return np.array(out, dtype=int)


@functools.lru_cache(maxsize=16)
def _graph(space: SpaceConfig, radius):
    d = space.domain
    n1, n2 = d.shape
    offs = stencil(radius)
    if 2 * radius >= min(n1, n2):
        raise ValueError("stencil radius too large for the grid")
    I, J = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    src = (I * n2 + J).ravel()
    X = d.nodes().reshape(-1, 2)
    rows, cols, w = [], [], []
    for di, dj in offs:
        dx = np.array([di * d.h1, dj * d.h2])
        wt = batched(_F_batch, space.params, X + 0.5 * dx, dx)
        dst = (((I + di) % n1) * n2 + (J + dj) % n2).ravel()
        rows.append(src)
        cols.append(dst)
        w.append(wt)
    G = sparse.csr_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n1 * n2, n1 * n2))
    return G


@dataclasses.dataclass
class DistanceField:
    source: tuple
    r: np.ndarray               # (n1, n2)
    predecessors: np.ndarray    # (n1, n2) flat index of predecessor, -1 at source
    displacement: np.ndarray    # (n1, n2, 2) unwrapped lattice displacement from p
    nonsmooth: np.ndarray       # (n1, n2) bool

    def path(self, q):
        """Node indices of the lattice shortest path from the source to q."""
        n2 = self.r.shape[1]
        k = q[0] * n2 + q[1]
        out = [tuple(q)]
        pred = self.predecessors.ravel()
        while pred[k] >= 0:
            k = pred[k]
            out.append((k // n2, k % n2))
        return out[::-1]


def nonsmooth_mask(r, h1, h2, factor=10.0):
    """Nodes where the discrete Laplacian of r exceeds ``factor`` x its median."""
    lap = np.abs(grid.laplacian5(np.asarray(r, float), h1, h2))
    med = np.median(lap)
    floor = 1e-12 * max(lap.max(), 1.0)
    return lap > factor * max(med, floor)


def _unwrapped(pred, shape, src):
    """Accumulate minimal-image lattice steps along predecessor links."""
    n1, n2 = shape
    k = np.arange(n1 * n2)
    p = pred.copy()
    p[src] = src
    di = (k // n2 - p // n2 + n1 // 2) % n1 - n1 // 2
    dj = (k % n2 - p % n2 + n2 // 2) % n2 - n2 // 2
    # pointer jumping: acc[k] = sum of steps from src to k
    acc = np.stack([di, dj], -1).astype(np.int64)
    ptr = p.copy()
    for _ in range(int(np.ceil(np.log2(n1 * n2))) + 1):
        acc = acc + acc[ptr]          # acc[src] == 0
        ptr = ptr[ptr]
        if np.all(ptr == src):
            break
    return acc


def distance_field(space: SpaceConfig, p, radius=STENCIL_RADIUS) -> DistanceField:
    """Forward distance r(x) = d(p, x) from grid node p (index pair)."""
    d = space.domain
    n1, n2 = d.shape
    p = (int(p[0]) % n1, int(p[1]) % n2)
    src = p[0] * n2 + p[1]
    dist, pred = csgraph.dijkstra(_graph(space, radius), directed=True, indices=src,
                                  return_predecessors=True)
    pred = pred.astype(np.int64)
    pred[src] = -1
    steps = _unwrapped(np.where(pred < 0, src, pred), (n1, n2), src)
    disp = steps * np.array([d.h1, d.h2])
    r = dist.reshape(n1, n2)
    return DistanceField(p, r, pred.reshape(n1, n2), disp.reshape(n1, n2, 2),
                         nonsmooth_mask(r, d.h1, d.h2))


def forward_distance(space: SpaceConfig, p, q, radius=STENCIL_RADIUS):
    """d(p, q) for grid nodes p, q."""
    return float(distance_field(space, p, radius).r[tuple(q)])


def ball_mask(space: SpaceConfig, p, R, field: DistanceField | None = None):
    """Boolean node mask of the forward ball B+_p(R) = {d(p, .) < R}."""
    d = space.domain
    if not R < min(d.L1, d.L2) / 2:
        raise BallWraps(f"R = {R} must be below half the smallest period")
    df = field if field is not None else distance_field(space, p)
    mask = df.r < R
    disp = df.displacement[mask]
    ext = disp.max(0) - disp.min(0)
    if np.any(ext >= d.periods - np.array([d.h1, d.h2])):
        raise BallWraps("forward ball wraps around the torus")
    return mask


# ---------------------------------------------------------------------------
# Smooth distance by Newton shooting
# ---------------------------------------------------------------------------

def _endpoint(P, p, th, t):
    e = _unit(th)
    u = e / _F_j(P, p, e)
    y = _rk4(P, jnp.concatenate([p, t * u]), 1.0 / NEWTON_STEPS, NEWTON_STEPS)
    return y


def _shoot_solve_j(P, p, target, th0, t0):
    def resid(z):
        r = _endpoint(P, p, z[0], z[1])[:2] - target
        return r, r

    def body(state):
        z, _, it = state
        J, r = jax.jacfwd(resid, has_aux=True)(z)
        dz = -_inv2(J) @ r
        dz = dz * jnp.minimum(1.0, 0.3 / (jnp.abs(dz[0]) + 1e-300))
        z = z + dz
        z = jnp.array([z[0], jnp.maximum(z[1], 0.5 * jnp.abs(z[1]))])
        return z, jnp.max(jnp.abs(dz)), it + 1

    def cond(state):
        _, step, it = state
        return (step > 1e-13) & (it < NEWTON_ITERS)

    z, _, _ = lax.while_loop(cond, body, (jnp.array([th0, t0]), jnp.asarray(1.0), 0))
    y = _endpoint(P, p, z[0], z[1])
    res = jnp.linalg.norm(y[:2] - target)
    return z[1], z[0], y[2:] / z[1], res


_shoot_solve_b = jax.jit(jax.vmap(_shoot_solve_j, in_axes=(None, None, 0, 0, 0)))


@dataclasses.dataclass
class SmoothDistance:
    source: tuple
    r: np.ndarray        # (n1, n2); Newton-refined where valid, Dijkstra elsewhere
    grad: np.ndarray     # (n1, n2, 2) unit velocity of the minimizer at x (= grad r)
    valid: np.ndarray    # (n1, n2) bool
    lattice: DistanceField


def smooth_distance(space: SpaceConfig, p, mask=None, field: DistanceField | None = None,
                    rel_tol=0.02):
    """Distance from p refined to a smooth field by geodesic shooting.

    For every node (restricted to ``mask``) solve exp_p(t u_theta) = x for the
    unit direction angle theta and length t, starting from the Dijkstra
    displacement.  A node is valid if Newton converged and the geodesic length
    does not exceed the lattice distance by more than ``rel_tol`` (otherwise
    the shot geodesic is not the minimizer).  The source itself is invalid.
    """
    d = space.domain
    df = field if field is not None else distance_field(space, p)
    sel = np.ones(d.shape, bool) if mask is None else np.asarray(mask, bool).copy()
    sel[df.source] = False
    P = space.params
    p_pt = d.node_point(df.source)
    disp = df.displacement[sel]
    r0 = df.r[sel]
    th0 = np.arctan2(disp[:, 1], disp[:, 0])
    r = df.r.copy()
    gradv = np.zeros(d.shape + (2,))
    valid = np.zeros(d.shape, bool)
    if len(disp):
        outs = []
        for i in range(0, len(disp), 4096):
            sl = slice(i, i + 4096)
            n = len(disp[sl])
            size = 4096 if len(disp) > 4096 else max(16, 1 << (n - 1).bit_length())
            pad = lambda a: np.concatenate([a, np.repeat(a[:1], size - n, 0)])
            o = _shoot_solve_b(P, jnp.asarray(p_pt), pad(p_pt + disp[sl]), pad(th0[sl]), pad(r0[sl]))
            outs.append([np.asarray(a)[:n] for a in o])
        t, th, gv, res = (np.concatenate(c) for c in zip(*outs))
        ok = (res < 1e-9 * np.maximum(1.0, t)) & (t > 0) & (t <= r0 * (1 + rel_tol) + d.h)
        idx = np.argwhere(sel)
        r[idx[:, 0], idx[:, 1]] = np.where(ok, t, r0)
        gradv[idx[:, 0], idx[:, 1]] = np.where(ok[:, None], gv, 0.0)
        valid[idx[:, 0], idx[:, 1]] = ok
    return SmoothDistance(df.source, r, gradv, valid, df)
