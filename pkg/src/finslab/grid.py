"""Periodic fourth-order finite-difference operators on node grids.

Arrays are indexed (i, j) with x1 = i*h1, x2 = j*h2.  The same functions
work on numpy and JAX arrays (they only use ``roll``).
"""

import numpy as np
import jax.numpy as jnp


def _xp(u):
    return np if isinstance(u, np.ndarray) else jnp


def d1(u, axis, h):
    """First derivative along ``axis``: (-u[+2] + 8u[+1] - 8u[-1] + u[-2]) / 12h."""
    xp = _xp(u)
    r = xp.roll
    return (-r(u, -2, axis) + 8 * r(u, -1, axis) - 8 * r(u, 1, axis) + r(u, 2, axis)) / (12 * h)


def differential(u, h1, h2):
    """Du as a covector grid (n1, n2, 2)."""
    xp = _xp(u)
    return xp.stack([d1(u, 0, h1), d1(u, 1, h2)], axis=-1)


def weighted_divergence(V, ephi, h1, h2):
    """exp(-Phi) d_i (exp(Phi) V^i), the conservative form of div_mu V.

    Summing ephi * result over the grid is exactly zero (the periodic central
    difference is antisymmetric), so mass is conserved to roundoff.
    """
    W = V * ephi[..., None]
    return (d1(W[..., 0], 0, h1) + d1(W[..., 1], 1, h2)) / ephi


def laplacian5(u, h1, h2):
    """Second-order five-point Laplacian (used for spike detection only)."""
    xp = _xp(u)
    r = xp.roll
    return ((r(u, -1, 0) - 2 * u + r(u, 1, 0)) / h1 ** 2
            + (r(u, -1, 1) - 2 * u + r(u, 1, 1)) / h2 ** 2)


def spectral_derivative(u, axis, L):
    """Exact derivative of the grid trigonometric interpolant (test oracle)."""
    n = u.shape[axis]
    k = np.fft.fftfreq(n, d=L / n) * 2 * np.pi
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1] * u.ndim
    shape[axis] = n
    return np.real(np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(u, axis=axis), axis=axis))


def spectral_jet(u, L1, L2):
    """Exact first, second and third derivatives of the trigonometric interpolant.

    Returns (Du, D2u, D3u) with shapes (n1, n2, 2), (..., 2, 2), (..., 2, 2, 2).
    The Nyquist modes are dropped so that all derivatives stay real.
    """
    u = np.asarray(u, float)
    n1, n2 = u.shape
    k = []
    for n, L in ((n1, L1), (n2, L2)):
        kk = np.fft.fftfreq(n, d=L / n) * 2 * np.pi
        kk[n // 2] = 0.0
        k.append(kk)
    ik = [1j * k[0][:, None], 1j * k[1][None, :]]
    U = np.fft.fft2(u)
    nyq = np.ones(u.shape)
    nyq[n1 // 2, :] = 0.0
    nyq[:, n2 // 2] = 0.0
    U = U * nyq

    def d(*axes):
        m = np.ones(u.shape, complex)
        for a in axes:
            m = m * ik[a]
        return np.real(np.fft.ifft2(m * U))

    D1 = np.stack([d(0), d(1)], -1)
    D2 = np.empty(u.shape + (2, 2))
    D3 = np.empty(u.shape + (2, 2, 2))
    for i in range(2):
        for j in range(2):
            D2[..., i, j] = d(i, j)
            for l in range(2):
                D3[..., i, j, l] = d(i, j, l)
    return D1, D2, D3
