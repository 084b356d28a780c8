"""Standard test spaces and reference runs used by the tests and the CLI.

All spaces live on the 2 pi x 2 pi torus with Lebesgue measure (Phi = 0):

    euclidean          F = |v|
    conformal          F = exp(lam)|v|, lam = 0.05 sin(x1) sin(x2)
    randers_constant   F = |v| + 0.3 v^1           (flat, non-Riemannian)
    randers_varying    F = exp(lam)|v| + b(x).v, lam as above (eps = 0.05),
                       b = (0.1 + 0.08 sin(x2), 0.06 cos(x1))
"""

from __future__ import annotations

import functools
import math

import numpy as np

from .metric import FourierMode, MetricSpec, SpaceConfig, TorusDomain
from .pde import SolverConfig, cfl_limit, solve

L = 2 * math.pi
RUN_TIMES = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0)


def domain(n=128):
    return TorusDomain(L, L, n, n)


def euclidean(n=128):
    return SpaceConfig(domain(n), MetricSpec.euclidean())


def conformal(n=128, epsilon=0.05):
    return SpaceConfig(domain(n), MetricSpec.conformal(epsilon))


def randers_constant(n=128, drift=(0.3, 0.0)):
    return SpaceConfig(domain(n), MetricSpec.randers(drift))


VARYING_DRIFT = (FourierMode(0.1, 0.08, 0, 1), FourierMode(0.0, 0.06, 1, 0, math.pi / 2))


def randers_varying(n=128, epsilon=0.05):
    return SpaceConfig(domain(n), MetricSpec.randers(VARYING_DRIFT, epsilon=epsilon))


FAMILIES = {
    "euclidean": euclidean,
    "conformal": conformal,
    "randers_constant": randers_constant,
    "randers_varying": randers_varying,
}


def bump_initial(space):
    """Smooth positive initial datum 2 + sin(x1) cos(x2)."""
    X = space.domain.nodes()
    return 2.0 + np.sin(X[..., 0]) * np.cos(X[..., 1])


def band_limited(space, seed, kmax=3, amp=1.0):
    """Random trigonometric polynomial with modes |k1|, |k2| <= kmax."""
    rng = np.random.default_rng(seed)
    X = space.domain.nodes()
    d = space.domain
    u = np.zeros(d.shape)
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(0, kmax + 1):
            if (k1, k2) == (0, 0):
                continue
            c, s = rng.standard_normal(2) / (1 + k1 * k1 + k2 * k2)
            ph = 2 * math.pi * (k1 * X[..., 0] / d.L1 + k2 * X[..., 1] / d.L2)
            u += amp * (c * np.cos(ph) + s * np.sin(ph))
    return u


def reference_run(space, a, b=0.0, t_end=1.0, times=RUN_TIMES, cfl=0.5, u0=None):
    """Solve from the bump datum at a fixed fraction of the CFL limit."""
    u0 = bump_initial(space) if u0 is None else u0
    dt = cfl_limit(space, cfl)
    cfg = SolverConfig(dt=dt, t_end=t_end, cfl=cfl, a=a, b=b,
                       snapshots=tuple(t for t in times if t <= t_end))
    return solve(space, u0, cfg)


@functools.lru_cache(maxsize=4)
def near_heat_run(n=128):
    """Euclidean run with a = 1e-6, b = 0 (the heat-equation limit)."""
    return reference_run(euclidean(n), a=1e-6)


@functools.lru_cache(maxsize=4)
def randers_run(n=128):
    """Varying-drift Randers run with a = -0.5, b = 0."""
    return reference_run(randers_varying(n), a=-0.5)
