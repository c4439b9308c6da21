"""Direct pseudo-spectral solver for the stochastic Euler equations with transport noise.

    du + P[(u . grad) u] dt + sum_k P[L*_{sigma_k} u] o dW^k = 0,
    L*_sigma u = (sigma . grad) u + (grad sigma)^T u.

Stratonovich calculus is realized by the Heun scheme driven by the path
increments; the pressure never appears because every stage is projected.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .lagrangian import VelocityTrajectory
from .noise import BrownianPath, NoiseBasis, refine
from .spectral import (TorusGrid, _project_hat, advect, dealias, from_spectral, jacobian_of_field, laplacian,
                       leray_project, to_spectral)

log = logging.getLogger(__name__)


@dataclass
class DirectSolverConfig:
    dealias: bool = True
    viscosity: float = 0.0
    retry: bool = True
    s: float = 3.0

    def __post_init__(self):
        if self.viscosity < 0:
            raise ValueError("viscosity must be nonnegative")


def lie_adjoint(grid: TorusGrid, sigma: np.ndarray, u: np.ndarray, dealiased: bool = True) -> np.ndarray:
    """L*_sigma u = (sigma . grad) u + (grad sigma)^T u."""
    if sigma.shape != u.shape:
        raise ValueError("sigma and u must be vector fields on the same grid")
    Js = jacobian_of_field(grid, sigma)
    out = advect(grid, sigma, u, dealiased=False) + np.einsum("ji...,j...->i...", Js, u)
    return dealias(grid, out) if dealiased else out


def lie_derivative(grid: TorusGrid, sigma: np.ndarray, w: np.ndarray) -> np.ndarray:
    """L_sigma w = (sigma . grad) w - (grad sigma) w, the L2-adjoint partner of ``lie_adjoint``."""
    Js = jacobian_of_field(grid, sigma)
    return advect(grid, sigma, w, dealiased=False) - np.einsum("ij...,j...->i...", Js, w)


def _heun(grid, u0, sigmas, path: BrownianPath, stop: int, cfg: DirectSolverConfig):
    dW = path.increments
    dts = np.diff(path.mesh)
    u = u0
    out = [u0]

    def increment(v, dt, sig_dw):
        r = advect(grid, v, v, dealiased=False) * dt
        if sig_dw is not None:
            Js = jacobian_of_field(grid, sig_dw)
            r += advect(grid, sig_dw, v, dealiased=False) + np.einsum("ji...,j...->i...", Js, v)
        if cfg.viscosity:
            r -= cfg.viscosity * dt * laplacian(grid, v)
        rh = to_spectral(grid, -r)
        if cfg.dealias:
            rh *= grid.dealias_mask
        return from_spectral(grid, _project_hat(grid, rh))

    for i in range(stop):
        sig_dw = None if sigmas is None else np.tensordot(dW[:, i], sigmas, axes=1)
        k1 = increment(u, dts[i], sig_dw)
        k2 = increment(u + k1, dts[i], sig_dw)
        u = u + 0.5 * (k1 + k2)
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"direct solver blew up; last stable time {path.mesh[i]:g}")
        out.append(u)
    return out


def solve_direct(u0: np.ndarray, basis: NoiseBasis | None, path: BrownianPath, T: float | None = None,
                 cfg: DirectSolverConfig | None = None) -> VelocityTrajectory:
    """Heun integration on the path mesh up to ``T``; ``basis=None`` means no noise."""
    cfg = cfg or DirectSolverConfig()
    grid = TorusGrid(u0.ndim - 1, u0.shape[-1]) if basis is None else basis.grid
    grid.check(u0, 1)
    T = path.T if T is None else T
    stop = path.index_of(T)
    if basis is not None and basis.m != path.m:
        raise ValueError("path and basis have different numbers of components")
    sigmas = None
    if basis is not None and basis.m > 0:
        sigmas = np.array([dealias(grid, f) for f in basis.fields])
    u = leray_project(grid, u0)
    if cfg.dealias:
        u = dealias(grid, u)
    try:
        values = _heun(grid, u, sigmas, path, stop, cfg)
        times = path.mesh[:stop + 1]
    except NumericalError:
        if not cfg.retry:
            raise
        log.warning("direct solver unstable; retrying once with halved step")
        fine = refine(path, 2)
        values = _heun(grid, u, sigmas, fine, 2 * stop, cfg)[::2]
        times = path.mesh[:stop + 1]
    return VelocityTrajectory(grid, times, np.array(values), cfg.s)


def shift_field(grid: TorusGrid, u: np.ndarray, shift) -> np.ndarray:
    """Exact spectral translation: returns u(x - shift)."""
    shift = np.asarray(shift, dtype=float).reshape(grid.d, *([1] * grid.d))
    phase = np.exp(-1j * np.sum(grid.wavenumbers * shift, axis=0))
    return from_spectral(grid, to_spectral(grid, u) * phase)


def random_shift_oracle(u0: np.ndarray, c, path: BrownianPath, T: float | None = None,
                        cfg: DirectSolverConfig | None = None) -> VelocityTrajectory:
    """Solution for spatially constant noise: u(t, x) = u_det(t, x - c W(t)).

    ``c`` is either a constant ``NoiseBasis`` (one vector per path component)
    or a single d-vector for a one-component path.
    """
    if isinstance(c, NoiseBasis):
        if not c.is_constant:
            raise ValueError("random-shift oracle needs a basis of constant fields")
        vectors = np.array([m.vector for m in c.modes], dtype=float)
    else:
        vectors = np.atleast_2d(np.asarray(c, dtype=float))
    if vectors.shape[0] != path.m:
        raise ValueError("one constant vector per path component required")
    det = solve_direct(u0, None, path, T, cfg)
    grid = det.grid
    out = np.array([shift_field(grid, v, vectors.T @ path.values[:, i]) for i, v in enumerate(det.values)])
    return VelocityTrajectory(grid, det.times, out, det.s)
