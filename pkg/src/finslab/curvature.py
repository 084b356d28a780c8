"""Spray, Chern connection, curvatures, distortion and S-curvature.

All v- and x-derivatives of F^2 are taken by JAX automatic differentiation,
so the connection and curvature tensors carry no truncation error; only the
derivative of the distortion along geodesics (S and its derivative) is a
finite difference in time, as in its definition.

Conventions (n = 2):
    G^i  = 1/4 g^{il} (d^2F^2/dx^k dv^l v^k - dF^2/dx^l)   geodesics: x'' + 2G = 0
    N^i_j = dG^i/dv^j,   delta_k = d/dx^k - N^m_k d/dv^m
    Gamma^i_jk = 1/2 g^{il} (delta_k g_lj + delta_j g_lk - delta_l g_jk)
    R^i_jkl = delta_k Gamma^i_jl - delta_l Gamma^i_jk
              + Gamma^i_km Gamma^m_jl - Gamma^i_lm Gamma^m_jk
    K(u, v) = -R_ijkl(v) u^i v^j u^k v^l / (g(u,u) g(v,v) - g(u,v)^2)
            = g_v(R_v(u), u) / (same Gram determinant)
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import jax
import jax.numpy as jnp
from jax import lax

from . import grid
from .errors import BadN, DegenerateFlag, ZeroVector
from .metric import (SpaceConfig, _F_j, _F2_j, _g_j, _inv2, _det2, _phi_j, _unit, _legendre_j,
                     _angle_grid, batched, global_misalignment, _F_batch)

S_STEP = 1e-3          # time step for differencing tau along geodesics
GRAM_TOL = 1e-12


# ---------------------------------------------------------------------------
# Pointwise kernels
# ---------------------------------------------------------------------------

def _spray_j(P, x, v):
    gi = _inv2(_g_j(P, x, v))
    dx = jax.grad(_F2_j, 1)(P, x, v)
    # (d^2F^2 / dv^l dx^k) v^k as a single forward-mode product
    Mv = jax.jvp(lambda xx: jax.grad(_F2_j, 2)(P, xx, v), (x,), (v,))[1]
    return 0.25 * gi @ (Mv - dx)


def _nlc_j(P, x, v):
    return jax.jacfwd(_spray_j, 2)(P, x, v)


def _horizontal(f):
    """delta_k f = d_x^k f - N^m_k d_v^m f, appended as a trailing index k."""
    def df(P, x, v):
        Jx = jax.jacfwd(f, 1)(P, x, v)
        Jv = jax.jacfwd(f, 2)(P, x, v)
        return Jx - jnp.einsum("...m,mk->...k", Jv, _nlc_j(P, x, v))
    return df


def _chern_j(P, x, v):
    gi = _inv2(_g_j(P, x, v))
    dg = _horizontal(_g_j)(P, x, v)        # dg[l, j, k] = delta_k g_lj
    return 0.5 * jnp.einsum("il,ljk->ijk", gi,
                            dg + dg.transpose(0, 2, 1) - dg.transpose(2, 0, 1))


def _riemann_j(P, x, v):
    G = _chern_j(P, x, v)
    dG = _horizontal(_chern_j)(P, x, v)    # dG[i, j, l, k] = delta_k Gamma^i_jl
    return (dG.transpose(0, 1, 3, 2) - dG
            + jnp.einsum("ikm,mjl->ijkl", G, G) - jnp.einsum("ilm,mjk->ijkl", G, G))


def _rv_j(P, x, v):
    """Riemann curvature operator R_v, R_v(u)^i = R^i_jkl v^j u^k v^l, from the spray:

    R^i_k = 2 dG^i/dx^k - v^j d^2G^i/dx^j dv^k + 2 G^j d^2G^i/dv^j dv^k
            - dG^i/dv^j dG^j/dv^k.
    (Agrees with the contraction of the full Chern tensor; far cheaper.)
    """
    G = _spray_j(P, x, v)
    N = _nlc_j(P, x, v)
    dGdx = jax.jacfwd(_spray_j, 1)(P, x, v)
    dNdx = jax.jacfwd(_nlc_j, 1)(P, x, v)
    dNdv = jax.jacfwd(_nlc_j, 2)(P, x, v)
    return (2 * dGdx - jnp.einsum("ikj,j->ik", dNdx, v)
            + 2 * jnp.einsum("j,ijk->ik", G, dNdv) - N @ N)


def _flag_from(Rv, g, v, u):
    num = (Rv @ u) @ g @ u
    den = (u @ g @ u) * (v @ g @ v) - (u @ g @ v) ** 2
    return num / den, den


def _flag_j(P, x, v, u):
    return _flag_from(_rv_j(P, x, v), _g_j(P, x, v), v, u)


def _tau_j(P, x, v):
    return 0.5 * jnp.log(_det2(_g_j(P, x, v))) - _phi_j(P, x)


def _geodesic_rhs(P, y):
    x, v = y[:2], y[2:]
    return jnp.concatenate([v, -2.0 * _spray_j(P, x, v)])


def _rk4(P, y, dt, steps):
    def body(_, y):
        k1 = _geodesic_rhs(P, y)
        k2 = _geodesic_rhs(P, y + 0.5 * dt * k1)
        k3 = _geodesic_rhs(P, y + 0.5 * dt * k2)
        k4 = _geodesic_rhs(P, y + dt * k3)
        return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return lax.fori_loop(0, steps, body, y)


def _s_curv_j(P, x, v, eps):
    """S and S-dot by central differences of tau along the geodesic.

    Differences at +-eps and +-eps/2 are Richardson-combined; the raw
    difference between the two levels is returned as an error indicator.
    """
    y0 = jnp.concatenate([x, v])
    tau0 = _tau_j(P, x, v)

    def tau_at(t):
        y = _rk4(P, y0, t / 2, 2)
        return _tau_j(P, y[:2], y[2:])

    tp, tm, hp, hm = jax.vmap(tau_at)(jnp.array([eps, -eps, eps / 2, -eps / 2]))
    s1, s2 = (tp - tm) / (2 * eps), (hp - hm) / eps
    d1, d2 = (tp - 2 * tau0 + tm) / eps ** 2, (hp - 2 * tau0 + hm) / (eps / 2) ** 2
    S = (4 * s2 - s1) / 3
    Sd = (4 * d2 - d1) / 3
    return S, Sd, jnp.abs(s2 - s1), jnp.abs(d2 - d1)


def _trace_from(Rv, gv, gw, start):
    """g^{ij}(w) g_v(R_v(e_i), e_j) in a g_v-orthonormal basis (Gram-Schmidt)."""
    a = _unit(start)
    b = _unit(start + 0.5 * jnp.pi)
    e1 = a / jnp.sqrt(a @ gv @ a)
    b = b - (b @ gv @ e1) * e1
    e2 = b / jnp.sqrt(b @ gv @ b)
    E = jnp.stack([e1, e2], axis=1)                  # columns are basis vectors
    M = E.T @ Rv.T @ gv @ E                          # M[a,b] = g_v(R_v e_a, e_b)
    Gw = E.T @ gw @ E
    return jnp.sum(_inv2(Gw) * M)


def _mixed_trace_j(P, x, v, w, start):
    return _trace_from(_rv_j(P, x, v), _g_j(P, x, v), _g_j(P, x, w), start)


def _sample_j(P, x, v, u, w, eps, start):
    Rv = _rv_j(P, x, v)
    g = _g_j(P, x, v)
    K, den = _flag_from(Rv, g, v, u)
    rot = jnp.array([-v[1], v[0]])
    Kv, _ = _flag_from(Rv, g, v, rot)
    Fv = _F_j(P, x, v)
    S, Sd, eS, eSd = _s_curv_j(P, x, v, eps)
    tr = _trace_from(Rv, g, _g_j(P, x, w), start)
    return dict(K=K, gram=den, Ric=Fv ** 2 * Kv, tau=_tau_j(P, x, v), S=S, Sdot=Sd,
                S_err=eS, Sdot_err=eSd, trace=tr, F=Fv)


def _vm(fn, nargs):
    return jax.jit(jax.vmap(fn, in_axes=(None,) + (0,) * nargs))


_spray_b = _vm(_spray_j, 2)
_nlc_b = _vm(_nlc_j, 2)
_chern_b = _vm(_chern_j, 2)
_riemann_b = _vm(_riemann_j, 2)
_flag_b = _vm(_flag_j, 3)
_tau_b = _vm(_tau_j, 2)
_g_b = _vm(_g_j, 2)
_rv_b = _vm(_rv_j, 2)
_scurv_b = jax.jit(jax.vmap(_s_curv_j, in_axes=(None, 0, 0, None)))
_trace_b = jax.jit(jax.vmap(_mixed_trace_j, in_axes=(None, 0, 0, 0, None)))
_sample_b = jax.jit(jax.vmap(_sample_j, in_axes=(None, 0, 0, 0, 0, None, None)))


def _run(kernel, space, *arrays, extra=()):
    return batched(kernel, space.params, *arrays, extra=extra)


def _require_nonzero(space, x, *vs):
    for v in vs:
        if np.any(np.asarray(batched(_F_batch, space.params, x, v)) <= space.eta):
            raise ZeroVector("reference vector has F(v) <= eta")


def _scalar(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def _check_N(N):
    if N is None:
        return math.inf
    N = float(N)
    if not N > 2:
        raise BadN(f"N = {N} must satisfy N > 2 (or N = inf)")
    return N


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ConnectionCoeffs:
    Gamma: np.ndarray   # (..., 2, 2, 2)  Gamma^i_jk
    N: np.ndarray       # (..., 2, 2)     N^i_j
    G: np.ndarray       # (..., 2)        G^i


def spray(space: SpaceConfig, x, v):
    """Spray coefficients G^i(x, v) (2-homogeneous in v)."""
    _require_nonzero(space, x, v)
    return _run(_spray_b, space, x, v)


def nonlinear_connection(space: SpaceConfig, x, v):
    _require_nonzero(space, x, v)
    return _run(_nlc_b, space, x, v)


def chern_coefficients(space: SpaceConfig, x, v) -> ConnectionCoeffs:
    _require_nonzero(space, x, v)
    return ConnectionCoeffs(_run(_chern_b, space, x, v), _run(_nlc_b, space, x, v),
                            _run(_spray_b, space, x, v))


def chern_riemann(space: SpaceConfig, x, v):
    """R^i_jkl(x, v), antisymmetric in (k, l)."""
    _require_nonzero(space, x, v)
    return _run(_riemann_b, space, x, v)


def flag_curvature(space: SpaceConfig, x, v, u):
    """Flag curvature K(u, v) of the flag span{u, v} with pole v."""
    _require_nonzero(space, x, v)
    K, den = _run(_flag_b, space, x, v, u)
    if np.any(den < GRAM_TOL):
        raise DegenerateFlag("u and v are (nearly) linearly dependent")
    return _scalar(K)


def ricci(space: SpaceConfig, x, v):
    """Ric(x, v) = F^2(v) K(e, v) for any e transverse to v (n = 2)."""
    v = np.asarray(v, float)
    rot = np.stack([-v[..., 1], v[..., 0]], axis=-1)
    Fv = _scalar(batched(_F_batch, space.params, x, v))
    return Fv ** 2 * flag_curvature(space, x, v, rot)


def distortion(space: SpaceConfig, x, v):
    """tau(x, v) = log sqrt(det g(x, v)) - Phi(x)."""
    _require_nonzero(space, x, v)
    return _scalar(_run(_tau_b, space, x, v))


def s_curvature(space: SpaceConfig, x, v, eps=S_STEP):
    """(S, S-dot): first and second time derivatives of tau along the geodesic."""
    _require_nonzero(space, x, v)
    S, Sd, _, _ = _run(_scurv_b, space, x, v, extra=(eps,))
    return _scalar(S), _scalar(Sd)


def _weight(S, N):
    return 0.0 if math.isinf(N) else S ** 2 / (N - 2)


def weighted_ricci(space: SpaceConfig, x, v, N=math.inf):
    """Ric^N = Ric + S-dot - S^2/(N - 2);  N = inf drops the last term."""
    N = _check_N(N)
    S, Sd = s_curvature(space, x, v)
    return ricci(space, x, v) + Sd - _weight(S, N)


def weighted_flag(space: SpaceConfig, x, v, w, k=math.inf):
    """K^k(v, w) = K(w, v) + S-dot/F^2(v) - S^2/((k - 2) F^2(v))  (n = 2)."""
    k = _check_N(k)
    S, Sd = s_curvature(space, x, v)
    F2 = np.asarray(batched(_F_batch, space.params, x, v)) ** 2
    return _scalar(flag_curvature(space, x, v, w) + (Sd - _weight(S, k)) / F2)


def mixed_weighted_ricci(space: SpaceConfig, x, v, w, N=math.inf, start=0.0):
    """^mRic^N_w(x, v) = tr_w R_v(v) + S-dot - S^2/(N - 2).

    ``start`` is the angle of the first Gram-Schmidt seed vector; the result
    is independent of it up to roundoff.
    """
    N = _check_N(N)
    _require_nonzero(space, x, v, w)
    tr = _run(_trace_b, space, x, v, w, extra=(float(start),))
    S, Sd = s_curvature(space, x, v)
    return _scalar(tr + Sd - _weight(S, N))


@dataclasses.dataclass
class CurvatureSample:
    x: np.ndarray
    v: np.ndarray
    u: np.ndarray
    w: np.ndarray
    N: float
    K: np.ndarray          # flag curvature K(u, v)
    Ric: np.ndarray
    tau: np.ndarray
    S: np.ndarray
    Sdot: np.ndarray
    RicN: np.ndarray
    KN: np.ndarray         # weighted flag curvature K^N(v, u)
    mRicN: np.ndarray      # mixed weighted Ricci with reference w
    F: np.ndarray


def curvature_sample(space: SpaceConfig, x, v, u=None, w=None, N=math.inf, start=0.0):
    """All pointwise curvature quantities at (x, v) in one batched evaluation.

    u defaults to the Euclidean rotation of v, w defaults to v (so that
    mRicN = RicN).
    """
    N = _check_N(N)
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    if u is None:
        u = np.stack([-v[..., 1], v[..., 0]], axis=-1)
    if w is None:
        w = v
    _require_nonzero(space, x, v, w)
    out = _run(_sample_b, space, x, v, u, w, extra=(S_STEP, float(start)))
    r = {k: np.asarray(val) for k, val in out.items()}
    corr = 0.0 if math.isinf(N) else r["S"] ** 2 / (N - 2)
    F2 = r["F"] ** 2
    return CurvatureSample(x=x, v=v, u=np.asarray(u, float), w=np.asarray(w, float), N=N,
                           K=r["K"], Ric=r["Ric"], tau=r["tau"], S=r["S"], Sdot=r["Sdot"],
                           RicN=r["Ric"] + r["Sdot"] - corr,
                           KN=r["K"] + (r["Sdot"] - corr) / F2,
                           mRicN=r["trace"] + r["Sdot"] - corr, F=r["F"])


# ---------------------------------------------------------------------------
# Tau tensor on grids
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TauTensor:
    vector: np.ndarray     # (n1, n2, 2) T(V, W), zero at excluded nodes
    norm: np.ndarray       # (n1, n2) max(F(T), F(-T))
    valid: np.ndarray      # (n1, n2) bool
    excluded: int

    @property
    def max_norm(self):
        return float(self.norm[self.valid].max()) if self.valid.any() else 0.0


def _raised_gradient(space, X, Vf, phi_grid):
    d = space.domain
    Dphi = grid.differential(phi_grid, d.h1, d.h2)
    g = np.asarray(_run(_g_b, space, X, Vf))
    return np.linalg.solve(g, Dphi[..., None])[..., 0]


def tau_tensor(space: SpaceConfig, V, W, mask=None):
    """T(V, W) = grad^V tau(V) - grad^W tau(W) on the node grid.

    grad^V phi := g^{-1}(V) D phi, applied to phi(x) = tau(x, V(x)); the
    differential is the periodic fourth-order difference.  Nodes where V or W
    is (near) zero are excluded.  ``mask`` restricts which nodes are valid.
    """
    X = space.domain.nodes()
    V = np.asarray(V, float)
    W = np.asarray(W, float)
    FV = batched(_F_batch, space.params, X, V)
    FW = batched(_F_batch, space.params, X, W)
    ok = (FV > space.eta) & (FW > space.eta)
    e1 = np.array([1.0, 0.0])
    Vs = np.where(ok[..., None], V, e1)
    Ws = np.where(ok[..., None], W, e1)
    tV = _run(_tau_b, space, X, Vs)
    tW = _run(_tau_b, space, X, Ws)
    T = _raised_gradient(space, X, Vs, tV) - _raised_gradient(space, X, Ws, tW)
    # a difference stencil touching an excluded node is unreliable
    bad = ~ok
    spread = bad.copy()
    for s in (-2, -1, 1, 2):
        spread |= np.roll(bad, s, 0) | np.roll(bad, s, 1)
    valid = ~spread
    if mask is not None:
        valid &= np.asarray(mask, bool)
    T = np.where(valid[..., None], T, 0.0)
    norm = np.maximum(batched(_F_batch, space.params, X, T), batched(_F_batch, space.params, X, -T))
    return TauTensor(T, np.where(valid, norm, 0.0), valid, int((~valid).sum()))


# ---------------------------------------------------------------------------
# Region-wide bounds
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class BoundScan:
    region: str
    N: float
    reference: str
    K_lower: float
    A_upper: float
    min_normalized: float
    n_points: int
    n_angles: int
    argmin: tuple


def _region_mask(space, region):
    shape = space.domain.shape
    if region is None or (isinstance(region, str) and region == "torus"):
        return np.ones(shape, bool), "torus"
    if isinstance(region, np.ndarray):
        return region.astype(bool), "mask"
    p, R = region
    from .geodesics import ball_mask
    return ball_mask(space, p, R), f"ball(p={tuple(p)}, R={R})"


def reference_field(space, tag, p=None, region_mask=None):
    """Reference vector field for the mixed trace: 'x1', 'x2', 'grad_r'."""
    X = space.domain.nodes()
    if tag == "x1":
        return np.broadcast_to([1.0, 0.0], X.shape).copy()
    if tag == "x2":
        return np.broadcast_to([0.0, 1.0], X.shape).copy()
    if tag == "grad_r":
        if p is None:
            raise ValueError("grad_r reference needs a center p")
        from .geodesics import smooth_distance
        sd = smooth_distance(space, p, mask=region_mask)
        return np.where(sd.valid[..., None], sd.grad, 0.0)
    raise ValueError(f"unknown reference field {tag!r}")


def bound_scan(space: SpaceConfig, region=None, N=math.inf, reference="weighted",
               n_angles=16, stride=1, m_misalign=64):
    """Sampled lower curvature bound K and misalignment bound A over a region.

    region: None / 'torus', a boolean node mask, or (p_index, R) for the
        forward ball B_p(R).
    reference: 'weighted' (w = v, i.e. Ric^N), 'x1', 'x2', 'grad_r'
        (w = gradient of the distance from the ball center), or an explicit
        (n1, n2, 2) vector field.
    Samples every ``stride``-th node of the region and ``n_angles`` nested
    directions; K_lower = max(0, -min mRic^N_w(v) / F^2(v)).
    """
    N = _check_N(N)
    mask, rdesc = _region_mask(space, region)
    if not mask.any():
        raise ValueError("region is empty")
    sub = np.zeros_like(mask)
    sub[::stride, ::stride] = True
    pts = mask & sub
    X = space.domain.nodes()
    if isinstance(reference, str):
        tag = reference
        if reference == "weighted":
            Wf = None
        else:
            p = region[0] if isinstance(region, tuple) else None
            Wf = reference_field(space, reference, p=p, region_mask=mask)
    else:
        tag = "field"
        Wf = np.asarray(reference, float)
    if Wf is not None:
        FW = batched(_F_batch, space.params, X, Wf)
        pts &= FW > space.eta
    xs = X[pts]
    thetas = _angle_grid(space, n_angles)
    vs = np.stack([np.cos(thetas), np.sin(thetas)], -1)
    xx = np.repeat(xs, n_angles, axis=0)
    vv = np.tile(vs, (len(xs), 1))
    ww = vv if Wf is None else np.repeat(Wf[pts], n_angles, axis=0)
    vals = []
    for i in range(0, len(xx), 16384):
        cs = curvature_sample(space, xx[i:i + 16384], vv[i:i + 16384], w=ww[i:i + 16384], N=N)
        vals.append(cs.mRicN / cs.F ** 2)
    vals = np.concatenate(vals)
    k = int(np.argmin(vals))
    A = global_misalignment(space, m=m_misalign, mask=mask)
    return BoundScan(region=rdesc, N=N, reference=tag, K_lower=max(0.0, -float(vals[k])),
                     A_upper=A, min_normalized=float(vals[k]), n_points=len(xs),
                     n_angles=n_angles, argmin=(tuple(xx[k]), float(math.atan2(vv[k][1], vv[k][0]))))
