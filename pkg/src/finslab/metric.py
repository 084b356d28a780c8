"""Finsler metric and measure families on the flat 2-torus.

Every family is an instance of one formula,

    F(x, v) = exp(lam(x)) * |v| + b(x) . v,

with lam(x) = eps * sin(2 pi k1 x1 / L1) * sin(2 pi k2 x2 / L2) and a drift
one-form b whose components are "constant plus one Fourier mode":

    euclidean:  eps = 0, b = 0
    conformal:  b = 0
    randers:    general (requires exp(-lam)|b| <= 0.95 everywhere)

Because the family tag only restricts parameters, a single set of compiled
JAX kernels serves every space; the numeric parameters are passed as a
pytree (``SpaceConfig.params``) rather than baked into the trace.

The measure is dmu = exp(Phi) dx1 dx2 with Phi = (Fourier mode) + c * lam,
so that the Riemannian volume of the conformal family (Phi = 2 lam) is
expressible exactly.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import jax
import jax.numpy as jnp
from jax import lax

from .errors import InvalidSpec, NonConvergence, ZeroVector

jax.config.update("jax_enable_x64", True)

FAMILIES = ("euclidean", "conformal", "randers")
DRIFT_MARGIN = 0.95
TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Specifications
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TorusDomain:
    """Flat torus [0, L1) x [0, L2) with an n1 x n2 node grid ('ij' order)."""

    L1: float = TWO_PI
    L2: float = TWO_PI
    n1: int = 64
    n2: int = 64

    def __post_init__(self):
        if not (self.L1 > 0 and self.L2 > 0):
            raise InvalidSpec("torus periods must be positive")
        for n in (self.n1, self.n2):
            if int(n) != n or n < 16 or n % 2:
                raise InvalidSpec(f"grid size {n} must be an even integer >= 16")

    @property
    def h1(self):
        return self.L1 / self.n1

    @property
    def h2(self):
        return self.L2 / self.n2

    @property
    def h(self):
        """Smallest mesh width."""
        return min(self.h1, self.h2)

    @property
    def periods(self):
        return np.array([self.L1, self.L2])

    @property
    def shape(self):
        return (self.n1, self.n2)

    @property
    def cell_area(self):
        return self.h1 * self.h2

    def nodes(self):
        """Node coordinates, shape (n1, n2, 2)."""
        x1 = np.arange(self.n1) * self.h1
        x2 = np.arange(self.n2) * self.h2
        X1, X2 = np.meshgrid(x1, x2, indexing="ij")
        return np.stack([X1, X2], axis=-1)

    def node_point(self, idx):
        i, j = idx
        return np.array([(i % self.n1) * self.h1, (j % self.n2) * self.h2])

    def node_index(self, point, tol=1e-9):
        """Grid index of a point lying on a node (coordinates taken mod periods)."""
        p = np.mod(np.asarray(point, float), self.periods)
        fi, fj = p[0] / self.h1, p[1] / self.h2
        i, j = round(fi), round(fj)
        if abs(fi - i) > tol or abs(fj - j) > tol:
            raise ValueError(f"point {tuple(point)} is not a grid node")
        return (i % self.n1, j % self.n2)

    def wrap(self, x):
        return np.mod(x, self.periods)


@dataclasses.dataclass(frozen=True)
class FourierMode:
    """const + amp * sin(2 pi (k1 x1 / L1 + k2 x2 / L2) + phase)."""

    const: float = 0.0
    amp: float = 0.0
    k1: int = 0
    k2: int = 0
    phase: float = 0.0

    def as_array(self):
        return np.array([self.const, self.amp, self.k1, self.k2, self.phase], float)

    def sup_abs(self):
        return abs(self.const) + abs(self.amp)


@dataclasses.dataclass(frozen=True)
class MetricSpec:
    family: str = "euclidean"
    epsilon: float = 0.0
    k1: int = 1
    k2: int = 1
    drift: tuple = (FourierMode(), FourierMode())

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown metric family {self.family!r}")
        if len(self.drift) != 2:
            raise InvalidSpec("drift needs exactly two components")
        if abs(self.epsilon) > 0.5:
            raise InvalidSpec("conformal amplitude |epsilon| must be <= 0.5")
        has_drift = any(m.sup_abs() > 0 for m in self.drift)
        if self.family == "euclidean" and (self.epsilon != 0 or has_drift):
            raise InvalidSpec("euclidean family takes no epsilon and no drift")
        if self.family == "conformal" and has_drift:
            raise InvalidSpec("conformal family takes no drift")

    @classmethod
    def euclidean(cls):
        return cls("euclidean")

    @classmethod
    def conformal(cls, epsilon, k1=1, k2=1):
        return cls("conformal", epsilon, k1, k2)

    @classmethod
    def randers(cls, drift, epsilon=0.0, k1=1, k2=1):
        d = tuple(m if isinstance(m, FourierMode) else FourierMode(const=float(m)) for m in drift)
        return cls("randers", epsilon, k1, k2, d)

    @property
    def riemannian(self):
        return self.family != "randers"


@dataclasses.dataclass(frozen=True)
class MeasureSpec:
    """Phi(x) = phi(x) + lam_coeff * lam(x);  dmu = exp(Phi) dx."""

    phi: FourierMode = FourierMode()
    lam_coeff: float = 0.0


@dataclasses.dataclass(frozen=True)
class SpaceConfig:
    domain: TorusDomain = TorusDomain()
    metric: MetricSpec = MetricSpec()
    measure: MeasureSpec = MeasureSpec()
    h_v: float = 1e-3
    h_x: float = 1e-3
    eta: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        h = self.domain.h
        if not (0 < self.h_v < h and 0 < self.h_x < h):
            raise InvalidSpec("derivative steps h_v, h_x must lie in (0, min mesh width)")
        if not self.eta > 0:
            raise InvalidSpec("zero-gradient threshold eta must be positive")
        if self.metric.family == "randers":
            worst = self.max_drift_norm()
            if worst > DRIFT_MARGIN:
                raise InvalidSpec(
                    f"drift norm {worst:.4f} exceeds the validity margin {DRIFT_MARGIN}")

    @property
    def riemannian(self):
        return self.metric.riemannian

    @functools.cached_property
    def params(self):
        """Numeric parameters as a JAX pytree (shared compiled kernels)."""
        m, d = self.metric, self.domain
        return {
            "L": jnp.array([d.L1, d.L2]),
            "eps": jnp.asarray(float(m.epsilon)),
            "k": jnp.array([float(m.k1), float(m.k2)]),
            "drift": jnp.asarray(np.stack([md.as_array() for md in m.drift])),
            "phi": jnp.asarray(self.measure.phi.as_array()),
            "lam_coeff": jnp.asarray(float(self.measure.lam_coeff)),
        }

    def max_drift_norm(self, n=256):
        """max over a dense periodic sample of exp(-lam)|b| (base-metric norm)."""
        d = self.domain
        s = np.arange(n) / n
        X = np.stack(np.meshgrid(s * d.L1, s * d.L2, indexing="ij"), -1).reshape(-1, 2)
        return float(np.max(np.exp(-self.lam(X)) * np.linalg.norm(self.drift(X), axis=-1)))

    # cheap numpy evaluations of the coefficient functions
    def lam(self, x):
        x = np.asarray(x, float)
        m, d = self.metric, self.domain
        return m.epsilon * np.sin(TWO_PI * m.k1 * x[..., 0] / d.L1) * np.sin(TWO_PI * m.k2 * x[..., 1] / d.L2)

    def _mode(self, mode, x):
        d = self.domain
        return mode.const + mode.amp * np.sin(
            TWO_PI * (mode.k1 * x[..., 0] / d.L1 + mode.k2 * x[..., 1] / d.L2) + mode.phase)

    def drift(self, x):
        x = np.asarray(x, float)
        return np.stack([self._mode(m, x) for m in self.metric.drift], axis=-1)

    def phi(self, x):
        x = np.asarray(x, float)
        return self._mode(self.measure.phi, x) + self.measure.lam_coeff * self.lam(x)


# ---------------------------------------------------------------------------
# Pointwise JAX kernels (P = SpaceConfig.params, x and v of shape (2,))
# ---------------------------------------------------------------------------

def _mode_j(m, L, x):
    return m[0] + m[1] * jnp.sin(TWO_PI * (m[2] * x[0] / L[0] + m[3] * x[1] / L[1]) + m[4])


def _lam_j(P, x):
    L, k = P["L"], P["k"]
    return P["eps"] * jnp.sin(TWO_PI * k[0] * x[0] / L[0]) * jnp.sin(TWO_PI * k[1] * x[1] / L[1])


def _drift_j(P, x):
    return jnp.stack([_mode_j(P["drift"][0], P["L"], x), _mode_j(P["drift"][1], P["L"], x)])


def _phi_j(P, x):
    return _mode_j(P["phi"], P["L"], x) + P["lam_coeff"] * _lam_j(P, x)


def _F_j(P, x, v):
    return jnp.exp(_lam_j(P, x)) * jnp.sqrt(v @ v) + _drift_j(P, x) @ v


def _F2_j(P, x, v):
    return _F_j(P, x, v) ** 2


def _det2(a):
    return a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]


def _inv2(a):
    """Explicit inverse of a 2x2 matrix (avoids batched LAPACK calls)."""
    adj = jnp.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]])
    return adj / _det2(a)


def _g_j(P, x, v):
    return 0.5 * jax.hessian(_F2_j, argnums=2)(P, x, v)


def _cartan_j(P, x, v):
    return 0.25 * jax.jacfwd(jax.hessian(_F2_j, argnums=2), argnums=2)(P, x, v)


def _unit(theta):
    return jnp.stack([jnp.cos(theta), jnp.sin(theta)])


def _dual_closed_j(P, x, xi):
    """Closed-form dual norm of F = e^lam |v| + b.v (a Randers norm over the
    base metric e^{2 lam} delta): with <.,.> taken in the inverse base metric,

        F*(xi) = (-<xi,b> + sqrt(<xi,b>^2 + (1 - |b|^2) |xi|^2)) / (1 - |b|^2).
    """
    lam = _lam_j(P, x)
    b = _drift_j(P, x)
    ai = jnp.exp(-2 * lam)
    xb = ai * (xi @ b)
    bb = ai * (b @ b)
    xx = ai * (xi @ xi)
    return (-xb + jnp.sqrt(xb ** 2 + (1 - bb) * xx)) / (1 - bb)


def _legendre_closed_j(P, x, xi):
    """L*(xi) = F*(xi) grad F*(xi) from the closed form; (v, F*, True)."""
    zero = (xi @ xi) == 0
    xs = jnp.where(zero, jnp.array([1.0, 0.0]), xi)
    fs, dfs = jax.value_and_grad(_dual_closed_j, 2)(P, x, xs)
    v = jnp.where(zero, 0.0, fs * dfs)
    return v, jnp.where(zero, 0.0, fs), jnp.asarray(True)


def _legendre_j(P, x, xi):
    """Legendre transform of one covector by Newton iteration on the angle.

    The maximiser of h(theta) = xi(e_theta) / F(e_theta) gives the direction
    of L*(xi) and F*(xi) = h(theta*).  The closed-form Randers dual supplies
    the starting angle, so for the implemented families the iteration only
    confirms it.  Returns (v, F*(xi), converged).
    """
    nrm = jnp.sqrt(xi @ xi)
    zero = nrm == 0
    xs = jnp.where(zero, jnp.array([1.0, 0.0]), xi)
    b = _drift_j(P, x)
    fs0 = _dual_closed_j(P, x, xs)
    d0 = xs - fs0 * b
    th0 = jnp.arctan2(d0[1], d0[0])

    def h(th):
        e = _unit(th)
        return (xs @ e) / _F_j(P, x, e)

    dh = jax.grad(h)
    d2h = jax.grad(dh)

    def body(state):
        th, _, it = state
        g1, g2 = dh(th), d2h(th)
        step = jnp.where(g2 < 0, -g1 / jnp.where(g2 < 0, g2, -1.0), 0.1 * jnp.sign(g1))
        step = jnp.clip(step, -0.25, 0.25)
        return th + step, step, it + 1

    def cond(state):
        _, step, it = state
        return (jnp.abs(step) > 1e-14) & (it < 50)

    th, _, _ = lax.while_loop(cond, body, (th0, jnp.asarray(1.0), 0))
    fs = h(th)
    conv = jnp.abs(dh(th)) <= 1e-9 * jnp.abs(fs) + 1e-300
    e = _unit(th)
    v = fs * e / _F_j(P, x, e)
    v = jnp.where(zero, 0.0, v)
    fs = jnp.where(zero, 0.0, fs)
    return v, fs, conv | zero


def _misalignment_j(P, x, thetas):
    """Sampled max over Y of max_V g_V(Y,Y) / min_W g_W(Y,Y), then zoom ascent."""
    m = thetas.shape[0]

    def Q(thv, thy):
        E = jax.vmap(_unit)(thv)
        Y = jax.vmap(_unit)(thy)
        G = jax.vmap(lambda e: _g_j(P, x, e))(E)
        return jnp.einsum("kab,ja,jb->kj", G, Y, Y)

    q = Q(thetas, thetas)
    ratio = q.max(0) / q.min(0)
    j = jnp.argmax(ratio)
    best = ratio[j]
    tv, tw, ty = thetas[jnp.argmax(q[:, j])], thetas[jnp.argmin(q[:, j])], thetas[j]
    offs = jnp.linspace(-1.0, 1.0, 17)

    def refine(carry, width):
        best, tv, tw, ty = carry
        gv, gw, gy = tv + width * offs, tw + width * offs, ty + width * offs
        qv, qw = Q(gv, gy), Q(gw, gy)
        r = qv.max(0) / qw.min(0)
        jj = jnp.argmax(r)
        better = r[jj] > best
        new = (jnp.where(better, r[jj], best),
               jnp.where(better, gv[jnp.argmax(qv[:, jj])], tv),
               jnp.where(better, gw[jnp.argmin(qw[:, jj])], tw),
               jnp.where(better, gy[jj], ty))
        return new, None

    widths = (TWO_PI / m) * 0.25 ** jnp.arange(8)
    (best, tv, tw, ty), _ = lax.scan(refine, (best, tv, tw, ty), widths)
    return jnp.maximum(best, 1.0), jnp.stack([tv, tw, ty])


# ---------------------------------------------------------------------------
# Batched execution
# ---------------------------------------------------------------------------

def _bucket(n):
    size = 16
    while size < n:
        size *= 4
    return size


def batched(kernel, P, *arrays, extra=()):
    """Evaluate a vmapped, jitted pointwise kernel over broadcast batches.

    Each array has trailing shape (2,); leading shapes broadcast.  Batches are
    padded to a small set of bucket sizes to limit recompilation.
    Returns numpy arrays (or a tuple of them) with the leading batch shape.
    """
    arrs = [np.asarray(a, dtype=float) for a in arrays]
    lead = np.broadcast_shapes(*(a.shape[:-1] for a in arrs))
    flat = [np.broadcast_to(a, lead + a.shape[-1:]).reshape(-1, a.shape[-1]) for a in arrs]
    n = flat[0].shape[0]
    size = _bucket(n)
    if n == 0:
        raise ValueError("empty batch")
    padded = [np.concatenate([f, np.repeat(f[:1], size - n, axis=0)]) for f in flat]
    out = kernel(P, *padded, *extra)

    def unpack(o):
        o = np.asarray(o)[:n]
        return o.reshape(lead + o.shape[1:])

    if isinstance(out, dict):
        return {k: unpack(o) for k, o in out.items()}
    if isinstance(out, tuple):
        return tuple(unpack(o) for o in out)
    return unpack(out)


def _vm(fn, nargs):
    return jax.jit(jax.vmap(fn, in_axes=(None,) + (0,) * nargs))


_F_batch = _vm(_F_j, 2)
_g_batch = _vm(_g_j, 2)
_cartan_batch = _vm(_cartan_j, 2)
_legendre_batch = _vm(_legendre_j, 2)
_misalign_batch = jax.jit(jax.vmap(_misalignment_j, in_axes=(None, 0, None)))


def _check_nonzero(space, x, v):
    Fv = batched(_F_batch, space.params, x, v)
    if np.any(Fv <= space.eta):
        raise ZeroVector("reference vector has F(v) <= eta")
    return Fv


# ---------------------------------------------------------------------------
# Public operations (accept single points or batches with trailing dim 2)
# ---------------------------------------------------------------------------

def eval_F(space: SpaceConfig, x, v):
    """F(x, v) >= 0; positively 1-homogeneous in v, zero only at v = 0."""
    x = np.asarray(x, float)
    if space.metric.family == "randers":
        norm = np.exp(-space.lam(x)) * np.linalg.norm(space.drift(x), axis=-1)
        if np.any(norm >= 1):
            raise InvalidSpec("drift norm >= 1 detected")
    out = batched(_F_batch, space.params, x, v)
    return out if out.ndim else float(out)


def fundamental_tensor(space: SpaceConfig, x, v):
    """g_ij(x, v) = 1/2 d^2 F^2 / dv^i dv^j  (shape (..., 2, 2))."""
    _check_nonzero(space, x, v)
    return batched(_g_batch, space.params, x, v)


def cartan_tensor(space: SpaceConfig, x, v):
    """C_ijk(x, v) = 1/4 d^3 F^2 / dv^i dv^j dv^k  (shape (..., 2, 2, 2))."""
    _check_nonzero(space, x, v)
    return batched(_cartan_batch, space.params, x, v)


def _legendre(space, x, xi):
    v, fs, conv = batched(_legendre_batch, space.params, x, xi)
    if not np.all(conv):
        raise NonConvergence("angular Newton iteration for the Legendre transform failed")
    return v, fs


def dual_norm(space: SpaceConfig, x, xi):
    """F*(xi) = max over F(v) = 1 of xi(v)."""
    _, fs = _legendre(space, x, xi)
    return fs if fs.ndim else float(fs)


def legendre_transform(space: SpaceConfig, x, xi):
    """The tangent vector v with xi(v) = F*(xi)^2 and F(v) = F*(xi)."""
    v, _ = _legendre(space, x, xi)
    return v


def _angle_grid(space, m):
    offset = np.random.default_rng(space.seed).uniform(0.0, TWO_PI / 4096)
    return offset + TWO_PI * np.arange(m) / m


def misalignment(space: SpaceConfig, x, m: int = 64):
    """Sampled misalignment sup_{V,W,Y} g_V(Y,Y)/g_W(Y,Y) at x (a lower bound).

    The m-point angular grids are nested for m in powers of two, and the
    local zoom ascent only accepts improvements, so the result is a certified
    lower bound which does not decrease when m is doubled.
    """
    if m < 64:
        raise ValueError("angular resolution m must be >= 64")
    x = np.asarray(x, float)
    single = x.ndim == 1
    xs = x.reshape(-1, 2)
    thetas = jnp.asarray(_angle_grid(space, m))
    size = _bucket(len(xs))
    pad = np.concatenate([xs, np.repeat(xs[:1], size - len(xs), 0)])
    val, _ = _misalign_batch(space.params, pad, thetas)
    val = np.asarray(val)[: len(xs)].reshape(x.shape[:-1])
    return float(val) if single else val


def global_misalignment(space: SpaceConfig, m: int = 64, mask=None):
    """max over grid nodes (optionally restricted to a boolean node mask)."""
    X = space.domain.nodes()
    if mask is not None:
        X = X[np.asarray(mask, bool)]
    X = X.reshape(-1, 2)
    vals = np.concatenate([np.atleast_1d(misalignment(space, X[i:i + 4096], m))
                           for i in range(0, len(X), 4096)])
    return float(vals.max())
