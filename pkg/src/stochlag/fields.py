"""Named analytic initial data used by tests, oracles and the CLI."""
from __future__ import annotations

import numpy as np

from .spectral import TorusGrid, dealias, from_spectral, leray_project


def taylor_green(grid: TorusGrid, amplitude: float = 1.0) -> np.ndarray:
    """Steady 2D Taylor-Green vortex (sin x1 cos x2, -cos x1 sin x2).

    In 3D the same planar field is extended trivially along x3.
    """
    x = grid.coords
    u = np.zeros((grid.d, *grid.shape))
    u[0] = np.sin(x[0]) * np.cos(x[1])
    u[1] = -np.cos(x[0]) * np.sin(x[1])
    return amplitude * u


def shear(grid: TorusGrid, amplitude: float = 1.0, k: int = 1) -> np.ndarray:
    """Parallel shear (a sin(k x2), 0, ...)."""
    u = np.zeros((grid.d, *grid.shape))
    u[0] = amplitude * np.sin(k * grid.coords[1])
    return u


def random_bandlimited(grid: TorusGrid, seed: int, kmax: int = 4, amplitude: float = 1.0,
                       divergence_free: bool = True, components: int | None = None,
                       zero_mean: bool = True) -> np.ndarray:
    """Random real field with modes |k_j| <= kmax, rescaled to RMS ``amplitude``.

    The coefficients are drawn on the integer lattice independently of ``n``,
    so the same seed gives the same analytic field at every resolution.
    """
    if kmax >= grid.n / 3:
        raise ValueError("kmax too large for the dealiased band of this grid")
    ncomp = grid.d if components is None else components
    rng = np.random.default_rng(seed)
    side = 2 * kmax + 1
    c = rng.standard_normal((ncomp, *(side,) * grid.d)) + 1j * rng.standard_normal((ncomp, *(side,) * grid.d))
    ks = np.arange(-kmax, kmax + 1)
    kk = np.stack(np.meshgrid(*([ks] * grid.d), indexing="ij"))
    c /= (1.0 + np.sum(kk**2, axis=0)) ** 1.5
    coeffs = np.zeros((ncomp, *grid.shape), dtype=complex)
    coeffs[(slice(None), *np.mod(kk, grid.n))] = c
    # the real part symmetrizes c_k and c_-k, keeping the band
    f = from_spectral(grid, coeffs)
    if zero_mean:
        f -= f.reshape(ncomp, -1).mean(axis=1).reshape(ncomp, *([1] * grid.d))
    if divergence_free and ncomp == grid.d:
        f = leray_project(grid, f)
    f = dealias(grid, f)
    rms = np.sqrt(np.sum(np.mean(f.reshape(ncomp, -1) ** 2, axis=1)))
    if rms > 0:
        f *= amplitude / rms
    return f


def random_scalar(grid: TorusGrid, seed: int, kmax: int = 4, amplitude: float = 1.0) -> np.ndarray:
    return random_bandlimited(grid, seed, kmax, amplitude, divergence_free=False, components=1)[0]
