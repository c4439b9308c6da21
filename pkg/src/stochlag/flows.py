"""Torus diffeomorphisms stored as periodic displacements, and the noise flow."""
from __future__ import annotations

import warnings
from functools import cached_property

import numpy as np

from .errors import InversionError, NumericalError, ResolutionError
from .noise import BrownianPath, NoiseBasis
from .spectral import Interpolator, TorusGrid, jacobian_of_field

DET_FLOOR = 1e-8


def _matinv(J: np.ndarray) -> np.ndarray:
    """Pointwise inverse of a matrix field (d, d, ...)."""
    d = J.shape[0]
    if d == 2:
        det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        return np.stack([np.stack([J[1, 1], -J[0, 1]]), np.stack([-J[1, 0], J[0, 0]])]) / det
    moved = np.moveaxis(J, (0, 1), (-2, -1))
    return np.moveaxis(np.linalg.inv(moved), (-2, -1), (0, 1))


def _det(J: np.ndarray) -> np.ndarray:
    if J.shape[0] == 2:
        return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))


def matvec(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("ij...,j...->i...", A, v)


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("ij...,jk...->ik...", A, B)


def transpose(A: np.ndarray) -> np.ndarray:
    return np.swapaxes(A, 0, 1)


class DiffeoMap:
    """x -> x + displacement(x) (mod 2pi), sampled on a grid.

    The Jacobian is computed spectrally from the displacement on first use,
    unless one is supplied (e.g. by the chain rule in ``compose_maps``).
    """

    def __init__(self, grid: TorusGrid, displacement: np.ndarray, jacobian: np.ndarray | None = None):
        grid.check(displacement, 1)
        if displacement.shape[0] != grid.d:
            raise ValueError("displacement must have d components")
        displacement = np.array(displacement, dtype=float)
        if not np.all(np.isfinite(displacement)):
            raise NumericalError("non-finite displacement")
        self.grid = grid
        self.displacement = displacement
        self.displacement.setflags(write=False)
        if jacobian is not None:
            self.__dict__["jacobian"] = jacobian

    @classmethod
    def identity(cls, grid: TorusGrid) -> "DiffeoMap":
        return cls(grid, np.zeros((grid.d, *grid.shape)))

    @classmethod
    def translation(cls, grid: TorusGrid, c) -> "DiffeoMap":
        c = np.asarray(c, dtype=float).reshape(grid.d, *([1] * grid.d))
        return cls(grid, np.broadcast_to(c, (grid.d, *grid.shape)).copy())

    @property
    def positions(self) -> np.ndarray:
        return self.grid.coords + self.displacement

    @cached_property
    def jacobian(self) -> np.ndarray:
        J = jacobian_of_field(self.grid, self.displacement)
        for i in range(self.grid.d):
            J[i, i] += 1.0
        return J

    @cached_property
    def determinant(self) -> np.ndarray:
        return _det(self.jacobian)

    @cached_property
    def inverse_jacobian(self) -> np.ndarray:
        det = self.determinant
        worst = float(det.min())
        if worst <= DET_FLOOR:
            raise ResolutionError(f"Jacobian determinant {worst:.3e} <= {DET_FLOOR}")
        return _matinv(self.jacobian)

    def spectral_tail(self) -> float:
        """Fraction of displacement energy outside the dealiased band."""
        from .spectral import to_spectral
        dh = np.abs(to_spectral(self.grid, self.displacement)) ** 2
        tot = float(dh.sum())
        return 0.0 if tot == 0 else float(dh[:, ~self.grid.dealias_mask].sum()) / tot

    def __call__(self, points: np.ndarray, method: str = "spline", order: int = 5) -> np.ndarray:
        """Evaluate the map at off-grid points (no wrapping of the result)."""
        return points + Interpolator(self.grid, self.displacement, method, order)(points)


def jacobian(m: DiffeoMap) -> np.ndarray:
    return m.jacobian


def inverse_jacobian(m: DiffeoMap) -> np.ndarray:
    return m.inverse_jacobian


# ---------------------------------------------------------------------------
# noise flow

def heun_step(basis: NoiseBasis, p: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """One Stratonovich-Heun step of dp = sum_k sigma_k(p) o dW^k."""
    s0 = np.tensordot(dW, basis.evaluate(p), axes=1)
    pred = p + s0
    s1 = np.tensordot(dW, basis.evaluate(pred), axes=1)
    return p + 0.5 * (s0 + s1)


def noise_flow_positions(basis: NoiseBasis, path: BrownianPath, stop: int | None = None):
    """Yield particle positions phi_{t_i}(x) for i = 0..stop along the path."""
    if path.m != basis.m:
        raise ValueError(f"path has {path.m} components, basis has {basis.m}")
    stop = path.N if stop is None else stop
    p = basis.grid.coords.copy()
    yield p
    dW = path.increments
    for i in range(stop):
        p = heun_step(basis, p, dW[:, i])
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"noise flow blew up at t={path.mesh[i + 1]}")
        yield p


def solve_noise_flow(basis: NoiseBasis, path: BrownianPath, t: float) -> DiffeoMap:
    """phi_t for d phi = sum_k sigma_k(phi) o dW^k, phi_0 = identity."""
    stop = path.index_of(t)
    for p in noise_flow_positions(basis, path, stop):
        pass
    return DiffeoMap(basis.grid, p - basis.grid.coords)


def exact_noise_flow(basis: NoiseBasis, path: BrownianPath, t: float) -> DiffeoMap | None:
    """Closed-form phi_t where one exists, else None.

    Constant fields give a translation by sum c_j W_j(t).  Trig modes satisfy
    sigma . k = 0, so k . x is frozen along their flow; when all wavevectors
    are parallel the flow is x + sum a_j e_j cos(k_j . x + phase_j) W_j(t).
    """
    grid = basis.grid
    W = path.values[:, path.index_of(t)]
    comp = basis._compiled
    if all(c.kind == "constant" for c in comp):
        shift = sum((w * c.e for w, c in zip(W, comp)), np.zeros(grid.d))
        return DiffeoMap.translation(grid, shift)
    if not all(c.kind == "trig" for c in comp):
        return None
    k0 = comp[0].k / np.linalg.norm(comp[0].k)
    if any(np.linalg.norm(c.k / np.linalg.norm(c.k) - np.sign(c.k @ k0) * k0) > 1e-12 for c in comp):
        return None
    x = grid.coords
    disp = np.zeros_like(x)
    for w, c in zip(W, comp):
        phase = np.tensordot(c.k, x, axes=1) + c.phase
        disp += (w * c.amp * np.cos(phase))[None] * c.e.reshape(-1, *([1] * grid.d))
    return DiffeoMap(grid, disp)


# ---------------------------------------------------------------------------
# inversion, composition, pull-back

def invert_map(m: DiffeoMap, tol: float = 1e-12, max_iter: int = 100, method: str = "fixed-point",
               initial: DiffeoMap | None = None, order: int = 5, check_tol: float = 1e-9) -> DiffeoMap:
    """Inverse map by iterating y <- x - delta(y) on every grid point ``x``.

    ``method="newton"`` instead uses y <- y - J(y)^-1 (m(y) - x), which
    converges in a handful of steps for strongly deformed maps.
    """
    grid = m.grid
    x = grid.coords
    if np.abs(m.displacement).max() >= np.pi:
        warnings.warn("displacement exceeds pi; inversion may converge slowly", stacklevel=2)
    delta = Interpolator(grid, m.displacement, "spline", order)
    jac = Interpolator(grid, m.jacobian, "spline", order) if method == "newton" else None
    y = x - m.displacement if initial is None else initial.positions
    update = np.inf
    for _ in range(max_iter):
        if method == "newton":
            r = y + delta(y) - x
            step = matvec(_matinv(jac(y)), r)
            y = y - step
            update = float(np.abs(step).max())
        else:
            y_new = x - delta(y)
            update = float(np.abs(y_new - y).max())
            y = y_new
        if not np.isfinite(update):
            raise InversionError("inversion diverged", float("inf"))
        if update < tol:
            break
    residual = float(np.abs(y + delta(y) - x).max())
    if update >= tol and residual > check_tol:
        raise InversionError(f"inversion did not converge in {max_iter} iterations", residual)
    return DiffeoMap(grid, y - x)


def compose_maps(outer: DiffeoMap, inner: DiffeoMap, order: int = 5) -> DiffeoMap:
    """outer o inner, with the Jacobian carried by the chain rule."""
    if outer.grid != inner.grid:
        raise ValueError("maps live on different grids")
    p = inner.positions
    disp = inner.displacement + Interpolator(outer.grid, outer.displacement, "spline", order)(p)
    Jout = Interpolator(outer.grid, outer.jacobian, "spline", order)(p)
    return DiffeoMap(outer.grid, disp, matmul(Jout, inner.jacobian))


def pull_back_velocity(u: np.ndarray, m: DiffeoMap, method: str = "spline", order: int = 5) -> np.ndarray:
    """u~(x) = (grad m(x))^-1 u(m(x))."""
    m.grid.check(u, 1)
    if not np.any(m.displacement):
        return np.array(u, dtype=float)
    return matvec(m.inverse_jacobian, Interpolator(m.grid, u, method, order)(m.positions))
