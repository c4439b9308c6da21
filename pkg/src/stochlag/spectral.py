"""Fourier pseudo-spectral substrate on the periodic box [0, 2pi)^d.

Fields are plain numpy arrays whose trailing ``d`` axes are the spatial grid
(axis ``a`` runs along coordinate ``x_{a+1}``); leading axes index components:

    scalar  (n, ..., n)
    vector  (d, n, ..., n)
    matrix  (d, d, n, ..., n)   with  J[i, j] = d v_i / d x_j

Spectral coefficients use the mean-value convention
``c_k = n^-d sum_x f(x) exp(-i k.x)`` so that ``c_0`` is the spatial mean and
Sobolev norms do not depend on the resolution.
"""
from __future__ import annotations

import warnings
from functools import cached_property

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from . import _bspline


class TorusGrid:
    """Uniform periodic grid with ``n`` points per direction in ``d`` dimensions."""

    def __init__(self, d: int, n: int):
        if d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {d}")
        if n < 8 or n % 2:
            raise ValueError(f"points per dimension must be even and >= 8, got {n}")
        self.d = int(d)
        self.n = int(n)
        self.h = 2 * np.pi / self.n
        self.shape = (self.n,) * self.d
        self.axes = tuple(range(-self.d, 0))

    def __repr__(self):
        return f"TorusGrid(d={self.d}, n={self.n})"

    def __eq__(self, other):
        return isinstance(other, TorusGrid) and (self.d, self.n) == (other.d, other.n)

    def __hash__(self):
        return hash((self.d, self.n))

    @cached_property
    def coords(self) -> np.ndarray:
        """Grid point coordinates, shape (d, n, ..., n); exactly ``j * h``."""
        x = np.arange(self.n) * self.h
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"))

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavevectors in FFT order, shape (d, n, ..., n); Nyquist is -n/2."""
        k = np.fft.fftfreq(self.n, 1.0 / self.n)
        return np.stack(np.meshgrid(*([k] * self.d), indexing="ij"))

    @cached_property
    def kderiv(self) -> np.ndarray:
        """Derivative symbols: wavenumbers with the Nyquist entry zeroed."""
        k = self.wavenumbers.copy()
        k[k == -self.n // 2] = 0.0
        return k

    @cached_property
    def ksq(self) -> np.ndarray:
        return np.sum(self.wavenumbers**2, axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """2/3-rule mask: keep modes with every |k_j| < n/3."""
        return np.all(np.abs(self.wavenumbers) < self.n / 3.0, axis=0)

    def check(self, f: np.ndarray, ncomp_axes: int | None = None) -> None:
        if f.shape[f.ndim - self.d:] != self.shape:
            raise ValueError(f"field of shape {f.shape} does not live on {self}")
        if ncomp_axes is not None and f.ndim != self.d + ncomp_axes:
            raise ValueError(f"expected {ncomp_axes} component axes, got shape {f.shape}")


# ---------------------------------------------------------------------------
# transforms

def to_spectral(grid: TorusGrid, f: np.ndarray) -> np.ndarray:
    grid.check(f)
    return sfft.fftn(f, axes=grid.axes) / grid.n**grid.d


def from_spectral(grid: TorusGrid, coeffs: np.ndarray) -> np.ndarray:
    grid.check(coeffs)
    return sfft.ifftn(coeffs * grid.n**grid.d, axes=grid.axes).real


def dealias(grid: TorusGrid, f: np.ndarray) -> np.ndarray:
    return from_spectral(grid, to_spectral(grid, f) * grid.dealias_mask)


# ---------------------------------------------------------------------------
# differentiation

def gradient(grid: TorusGrid, f: np.ndarray) -> np.ndarray:
    """Spectral gradient of a scalar field, shape (d, ...)."""
    grid.check(f, 0)
    fh = to_spectral(grid, f)
    return from_spectral(grid, 1j * grid.kderiv * fh)


def jacobian_of_field(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """J[i, j] = d v_i / d x_j for a vector field ``v``."""
    grid.check(v, 1)
    vh = to_spectral(grid, v)
    return from_spectral(grid, 1j * grid.kderiv[None, :] * vh[:, None])


def divergence(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    grid.check(v, 1)
    vh = to_spectral(grid, v)
    return from_spectral(grid, np.sum(1j * grid.kderiv * vh, axis=0))


def laplacian(grid: TorusGrid, f: np.ndarray) -> np.ndarray:
    return from_spectral(grid, -np.sum(grid.kderiv**2, axis=0) * to_spectral(grid, f))


def curl2d(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """Scalar vorticity d1 v2 - d2 v1 of a planar field."""
    if grid.d != 2:
        raise ValueError("curl2d needs a 2D grid")
    grid.check(v, 1)
    vh = to_spectral(grid, v)
    k = grid.kderiv
    return from_spectral(grid, 1j * (k[0] * vh[1] - k[1] * vh[0]))


# ---------------------------------------------------------------------------
# projection and norms

def _project_hat(grid: TorusGrid, vh: np.ndarray) -> np.ndarray:
    k = grid.kderiv
    k2 = np.sum(k**2, axis=0)
    # modes with zero derivative symbol (mean, pure Nyquist) are left untouched
    inv = np.divide(1.0, k2, out=np.zeros_like(k2), where=k2 > 0)
    kdotv = np.sum(k * vh, axis=0)
    return vh - k * (kdotv * inv)


def leray_project(grid: TorusGrid, v: np.ndarray) -> np.ndarray:
    """Leray-Hodge projection onto divergence-free fields, mode by mode."""
    grid.check(v, 1)
    if v.shape[0] != grid.d:
        raise ValueError("vector field must have d components")
    return from_spectral(grid, _project_hat(grid, to_spectral(grid, v)))


def sobolev_inner(grid: TorusGrid, u: np.ndarray, v: np.ndarray, s: float) -> float:
    """(u, v)_s = sum_k (1+|k|^2)^s u_k . conj(v_k)."""
    if s < 0:
        raise ValueError("Sobolev index must be nonnegative")
    uh = to_spectral(grid, u)
    vh = to_spectral(grid, v)
    w = (1.0 + grid.ksq) ** s
    prod = uh * np.conj(vh)
    return float(np.sum(w * prod).real)


def sobolev_norm(grid: TorusGrid, v: np.ndarray, s: float = 0.0) -> float:
    if s < 0:
        raise ValueError("Sobolev index must be nonnegative")
    vh = to_spectral(grid, v)
    w = (1.0 + grid.ksq) ** s
    return float(np.sqrt(np.sum(w * np.abs(vh) ** 2)))


def l2_norm(grid: TorusGrid, v: np.ndarray) -> float:
    """Root-mean-square norm over the grid (equals the H^0 norm)."""
    grid.check(v)
    comp = v.reshape(-1, *grid.shape)
    return float(np.sqrt(np.sum(np.mean(comp**2, axis=grid.axes))))


def l2_inner(grid: TorusGrid, u: np.ndarray, v: np.ndarray) -> float:
    return float(np.sum(np.mean((u * v).reshape(-1, *grid.shape), axis=grid.axes)))


def check_sobolev_index(d: int, s: float) -> None:
    if s < 0:
        raise ValueError("Sobolev index must be nonnegative")
    if s <= d / 2 + 1:
        warnings.warn(f"Sobolev index s={s} does not exceed d/2+1={d / 2 + 1}", stacklevel=2)


# ---------------------------------------------------------------------------
# nonlinear terms

def advect(grid: TorusGrid, u: np.ndarray, v: np.ndarray, dealiased: bool = True) -> np.ndarray:
    """B(u, v) = (u . grad) v, physical-space product then 2/3 truncation."""
    grid.check(u, 1)
    grid.check(v)
    if v.ndim == grid.d:
        out = np.sum(u * gradient(grid, v), axis=0)
    else:
        out = np.einsum("j...,ij...->i...", u, jacobian_of_field(grid, v))
    return dealias(grid, out) if dealiased else out


def advection_ratio(grid: TorusGrid, u: np.ndarray, v: np.ndarray, s: float) -> float:
    """||B(u,v)||_s / (||u||_s ||v||_{s+1})."""
    return sobolev_norm(grid, advect(grid, u, v), s) / (
        sobolev_norm(grid, u, s) * sobolev_norm(grid, v, s + 1))


def advection_energy_ratio(grid: TorusGrid, u: np.ndarray, v: np.ndarray, s: float) -> float:
    """|(B(u,v), v)_s| / (||u||_s ||v||_s^2)."""
    return abs(sobolev_inner(grid, advect(grid, u, v), v, s)) / (
        sobolev_norm(grid, u, s) * sobolev_norm(grid, v, s) ** 2)


# ---------------------------------------------------------------------------
# off-grid evaluation

def _fourier_eval(grid: TorusGrid, coeffs: np.ndarray, pts: np.ndarray, chunk: int = 512) -> np.ndarray:
    d, n = grid.d, grid.n
    lead = coeffs.shape[:-d]
    C = coeffs.reshape(-1, *grid.shape)
    k = np.fft.fftfreq(n, 1.0 / n)
    out = np.empty((C.shape[0], pts.shape[1]))
    for start in range(0, pts.shape[1], chunk):
        p = pts[:, start:start + chunk]
        E = [np.exp(1j * np.outer(p[a], k)) for a in range(d)]
        if d == 2:
            T = np.einsum("cij,bj->cbi", C, E[1], optimize=True)
        else:
            T = np.einsum("cijk,bk->cbij", C, E[2], optimize=True)
            T = np.einsum("cbij,bj->cbi", T, E[1], optimize=True)
        out[:, start:start + chunk] = np.einsum("cbi,bi->cb", T, E[0], optimize=True).real
    return out.reshape(*lead, pts.shape[1])


class Interpolator:
    """Periodic interpolant of a (multi-component) field, built once, evaluated often.

    ``method="spline"`` uses a periodic B-spline of the given ``order``
    (error O(h^(order+1))); ``method="fourier"`` evaluates the trigonometric
    interpolant, exact for band-limited fields but O(n^d) per point.
    """

    def __init__(self, grid: TorusGrid, f: np.ndarray, method: str = "spline", order: int = 5):
        grid.check(f)
        self.grid = grid
        self.method = method
        self.order = order
        self.lead = f.shape[:f.ndim - grid.d]
        flat = f.reshape(-1, *grid.shape)
        if method == "spline":
            if not 1 <= order <= 5:
                raise ValueError("spline order must be in 1..5")
            self._data = np.stack([ndimage.spline_filter(c, order=order, mode="grid-wrap")
                                   if order > 1 else c for c in flat])
            if order % 2:
                self._data = _bspline.pad(self._data, order)
        elif method == "fourier":
            self._data = to_spectral(grid, flat)
        else:
            raise ValueError(f"unknown interpolation method {method!r}")

    @classmethod
    def blend(cls, a: "Interpolator", b: "Interpolator", theta: float) -> "Interpolator":
        """Interpolant of (1 - theta) f_a + theta f_b; coefficients are linear in the data."""
        out = cls.__new__(cls)
        out.grid, out.method, out.order, out.lead = a.grid, a.method, a.order, a.lead
        out._data = (1 - theta) * a._data + theta * b._data
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.shape[0] != self.grid.d:
            raise ValueError("points must have shape (d, ...)")
        pshape = points.shape[1:]
        pts = points.reshape(self.grid.d, -1)
        if self.method == "spline":
            idx = pts / self.grid.h
            if self.order % 2:
                vals = _bspline.evaluate(self._data, idx, self.order)
            else:
                vals = np.stack([ndimage.map_coordinates(c, idx, order=self.order, mode="grid-wrap",
                                                         prefilter=False) for c in self._data])
        else:
            vals = _fourier_eval(self.grid, self._data, np.mod(pts, 2 * np.pi))
        return vals.reshape(*self.lead, *pshape)


def sample_at(grid: TorusGrid, f: np.ndarray, points: np.ndarray, method: str = "fourier",
              order: int = 5) -> np.ndarray:
    """Evaluate ``f`` at arbitrary points of shape (d, ...), wrapped mod 2pi."""
    return Interpolator(grid, f, method, order)(points)


def compose(grid: TorusGrid, f: np.ndarray, m, method: str = "spline", order: int = 5) -> np.ndarray:
    """Grid samples of ``f o m`` for a map ``m`` with a ``positions`` array."""
    return Interpolator(grid, f, method, order)(m.positions)
