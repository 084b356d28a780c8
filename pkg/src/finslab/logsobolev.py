"""Finslerian log-energy functional and a descent search for its infimum.

    E(f) = int F^2(grad f) dmu / int f^2 log f^2 dmu,   normalised so that
    int f^2 dmu = vol_mu(M).

Integrals are the periodic trapezoidal rule (node sums times the cell area).
On the discrete level the gradient of the numerator is exactly -2 Lap f
(the conservative divergence is the negative adjoint of the differential),
so descent directions and the Euler-Lagrange residual use the same operators.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.special import xlogy

from . import pde
from .errors import DenominatorZero, NonPositive
from .metric import SpaceConfig

DEN_TOL = 1e-14


def _inner(space, f, g):
    return pde.integrate(space, f * g)


def normalize(space: SpaceConfig, f):
    """Rescale f so that int f^2 dmu = vol; returns (f, factor)."""
    f = np.asarray(f, float)
    vol = pde.integrate(space, np.ones_like(f))
    m = _inner(space, f, f)
    if m <= 0:
        raise DenominatorZero("f vanishes identically")
    c = math.sqrt(vol / m)
    return c * f, c


def _parts(space, f):
    _, fs = pde.gradient_field(space, f, return_norm=True)
    num = pde.integrate(space, fs ** 2)
    f2 = f * f
    den = pde.integrate(space, xlogy(f2, f2))
    vol = pde.integrate(space, np.ones_like(f))
    if abs(den) <= DEN_TOL * vol:
        raise DenominatorZero("int f^2 log f^2 dmu vanishes (|f| is constant)")
    return num, den


def logsobolev_energy(space: SpaceConfig, f):
    """E(f) after renormalisation, with a report of both integrals."""
    g, c = normalize(space, f)
    num, den = _parts(space, g)
    return num / den, {"numerator": num, "denominator": den, "scale": c,
                       "volume": pde.integrate(space, np.ones_like(g))}


def energy_gradient(space: SpaceConfig, f, E=None):
    """Tangential L^2(mu) gradient of E at a normalised f.

    grad N = -2 Lap f, grad D = 2 f log f^2 + 2 f, grad E = (grad N - E grad D) / D,
    projected onto the tangent space of the sphere int f^2 dmu = vol.
    """
    num, den = _parts(space, f)
    E = num / den if E is None else E
    gN = -2.0 * pde.laplacian(space, f)
    gD = 2.0 * xlogy(f, f * f) + 2.0 * f
    G = (gN - E * gD) / den
    return G - _inner(space, G, f) / _inner(space, f, f) * f, E


def euler_lagrange_residual(space: SpaceConfig, u, C):
    """Lap u + C u log u^2 + C u on the grid, and its sup norm.

    A normalised minimiser f satisfies Lap f + E f log f^2 = 0 (the Lagrange
    multiplier of the volume constraint equals -E), which is the displayed
    equation for u = exp(-1/2) f.
    """
    u = np.asarray(u, float)
    if np.any(u <= 0):
        raise NonPositive("Euler-Lagrange residual needs u > 0")
    res = pde.laplacian(space, u) + C * u * np.log(u * u) + C * u
    return res, float(np.max(np.abs(res)))


@dataclasses.dataclass
class CFLSResult:
    C: float                  # final energy, an upper bound for the infimum
    f: np.ndarray             # normalised final iterate
    history: list             # energy after every accepted step (history[0] = start)
    iterations: int
    restarts: int
    grad_norm: float

    @property
    def el_profile(self):
        """exp(-1/2) f: the scaling at which the displayed Euler-Lagrange equation holds."""
        return math.exp(-0.5) * self.f


def _sobolev_smoother(space):
    """Apply (1 - Lap_euclid)^{-1} on the periodic grid by FFT."""
    d = space.domain
    k1 = np.fft.fftfreq(d.n1, d=d.L1 / d.n1) * 2 * np.pi
    k2 = np.fft.fftfreq(d.n2, d=d.L2 / d.n2) * 2 * np.pi
    sym = 1.0 / (1.0 + k1[:, None] ** 2 + k2[None, :] ** 2)
    return lambda g: np.real(np.fft.ifft2(sym * np.fft.fft2(g)))


def _plain(space, f, g):
    return float(np.sum(f * g)) * space.domain.cell_area


def _direction(space, P, w, f, G):
    """H^1-preconditioned gradient projected onto the tangent of the constraint.

    g = w G is the gradient in the plain (unweighted) inner product and
    c = w f the constraint normal; d = P g - (<c, P g> / <c, P c>) P c
    satisfies <c, d> = 0 and <g, d> >= 0.
    """
    g = w * G
    c = w * f
    Pg, Pc = P(g), P(c)
    d = Pg - _plain(space, c, Pg) / _plain(space, c, Pc) * Pc
    return g, d


def cfls_search(space: SpaceConfig, f0, iters=200, armijo=1e-4, gtol=1e-12, seed=0,
                max_restarts=3, precondition=True):
    """Projected gradient descent for inf E on the constraint sphere.

    Search directions are Sobolev gradients, (1 - Lap)^{-1} applied to the
    L^2 gradient and projected onto the tangent space of int f^2 dmu = vol
    (``precondition=False`` gives the plain projected L^2 gradient).  Step
    lengths are Barzilai-Borwein with Armijo backtracking; the constraint is
    re-imposed by renormalising after every step and only decreasing steps
    are accepted.  A vanishing denominator restarts from a perturbed iterate.
    """
    f0 = np.asarray(f0, float)
    if np.ptp(f0) == 0:
        raise ValueError("cfls_search needs a nonconstant starting function")
    rng = np.random.default_rng(seed)
    P = _sobolev_smoother(space) if precondition else (lambda g: g)
    w = np.exp(space.phi(space.domain.nodes()))
    f, _ = normalize(space, f0)
    restarts = 0
    while True:
        try:
            G, E = energy_gradient(space, f)
            break
        except DenominatorZero:
            if restarts >= max_restarts:
                raise
            restarts += 1
            f, _ = normalize(space, f + 1e-3 * rng.standard_normal(f.shape))
    history = [E]
    g, dvec = _direction(space, P, w, f, G)
    slope = _plain(space, g, dvec)
    step = 1.0 / max(math.sqrt(_plain(space, dvec, dvec)), 1e-300)
    prev = None
    it = 0
    while it < iters and slope > gtol:
        if prev is not None:
            sv = f - prev[0]
            y = g - prev[1]
            sy = _plain(space, sv, y)
            if sy > 0:
                step = sy / _plain(space, y, P(y))
        t = step
        accepted = False
        for _ in range(50):
            try:
                trial, _ = normalize(space, f - t * dvec)
                Gt, Et = energy_gradient(space, trial)
            except DenominatorZero:
                t *= 0.5
                continue
            if Et <= E - armijo * t * slope and Et < E:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if restarts >= max_restarts:
                break
            restarts += 1
            f, _ = normalize(space, f + 1e-6 * rng.standard_normal(f.shape))
            G, E = energy_gradient(space, f)
            g, dvec = _direction(space, P, w, f, G)
            slope = _plain(space, g, dvec)
            prev = None
            continue
        prev = (f, g)
        f, G, E = trial, Gt, Et
        g, dvec = _direction(space, P, w, f, G)
        slope = _plain(space, g, dvec)
        history.append(E)
        it += 1
    return CFLSResult(E, f, history, it, restarts, math.sqrt(max(_inner(space, G, G), 0.0)))
