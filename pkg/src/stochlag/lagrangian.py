"""Lagrangian (Constantin-Iyer) fixed-point solver for the stochastic Euler equations.

One application of the map ``S`` to a velocity trajectory ``u`` on [0, T]:

    phi_t    noise flow, d phi = sum_k sigma_k(phi) o dW^k
    u~_t     = (grad phi_t)^-1 u_t(phi_t)              pulled-back velocity
    Y_t      d/dt Y = u~_t(Y), Y_0 = id                 random ODE (RK4)
    X_t      = phi_t o Y_t,  A_t = X_t^-1              back-to-labels map
    (S u)_t  = P[(grad A_t)^T u_0(A_t)]

``picard_solve`` iterates ``S`` from the constant trajectory u_0 and adapts
the time window when the iteration stops contracting.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InversionError, NumericalError, PicardNonconvergence, ResolutionError
from .flows import (DiffeoMap, compose_maps, invert_map, matvec, noise_flow_positions,
                    pull_back_velocity, transpose, _matinv)
from .noise import BrownianPath, NoiseBasis
from .spectral import (Interpolator, TorusGrid, dealias, divergence, l2_norm, leray_project,
                       sobolev_norm, advect)

log = logging.getLogger(__name__)


@dataclass
class VelocityTrajectory:
    grid: TorusGrid
    times: np.ndarray
    values: np.ndarray  # (N+1, d, n, ..., n)
    s: float = 3.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.values.shape[0] != self.times.size:
            raise ValueError("one snapshot per time required")
        self.grid.check(self.values[0], 1)

    @classmethod
    def constant(cls, grid, times, u0, s=3.0):
        return cls(grid, times, np.broadcast_to(u0, (len(times), *u0.shape)).copy(), s)

    def __len__(self):
        return self.times.size

    def __getitem__(self, i):
        return self.values[i]

    def norms(self, s: float | None = None) -> np.ndarray:
        s = self.s if s is None else s
        return np.array([sobolev_norm(self.grid, u, s) for u in self.values])

    def sigma_norm(self, s: float | None = None) -> float:
        """sup over snapshots of ||u(t_i)||_s."""
        return float(self.norms(s).max())

    def max_divergence(self) -> float:
        return max(float(np.abs(divergence(self.grid, u)).max()) for u in self.values)

    def distance(self, other: "VelocityTrajectory", s: float = 0.0) -> float:
        """Sigma_s distance sup_i ||u(t_i) - v(t_i)||_s."""
        return max(sobolev_norm(self.grid, a - b, s) for a, b in zip(self.values, other.values))


@dataclass
class LagrangianConfig:
    interp_order: int = 5
    substeps: int = 1
    inversion_method: str = "fixed-point"
    inversion_tol: float = 1e-12
    inversion_max_iter: int = 100
    dealias: bool = True


@dataclass
class PicardConfig:
    s: float = 3.0
    tol: float = 1e-8          # relative to ||u_0||_{Sigma_0}
    ratio_max: float = 0.9
    patience: int = 2          # consecutive ratios >= ratio_max before shrinking
    max_iters: int = 50
    T_min: float | None = None  # default T / 64
    M: float | None = None      # default 2 ||u_0||_s
    continuation: bool = True
    window: float | None = None  # initial window length, default T


@dataclass
class WindowReport:
    start: float
    length: float
    M: float
    tol: float
    increments: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    sigma_s_norms: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    decision: str = "pending"
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.increments)


@dataclass
class IterationReport:
    windows: list = field(default_factory=list)

    @property
    def accepted(self):
        return [w for w in self.windows if w.decision == "accepted"]

    @property
    def shrinks(self) -> int:
        return sum(w.decision == "shrunk" for w in self.windows)

    @property
    def iterations(self) -> int:
        return sum(w.iterations for w in self.accepted)

    def to_dict(self, timing: bool = False) -> dict:
        """Plain-data view; wall-clock times are left out unless asked for so reruns compare equal."""
        windows = []
        for w in self.windows:
            row = asdict(w) | {"iterations": w.iterations}
            if not timing:
                row.pop("wall_seconds")
            windows.append(row)
        return {"windows": windows, "shrinks": self.shrinks, "iterations": self.iterations}

    def to_json(self, path=None, timing: bool = False) -> str:
        text = json.dumps(self.to_dict(timing), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# particle ODE

def _rk4_positions(grid: TorusGrid, utilde: np.ndarray, times: np.ndarray, substeps: int = 1,
                   order: int = 5, backward: bool = False):
    """Yield RK4 particle positions at every snapshot of a velocity sequence.

    The velocity is linear in time between snapshots. ``backward=True``
    yields the one-interval backward feet instead: for each i, the points
    reached from the grid at t_{i+1} by integrating back to t_i.
    """
    h = grid.h
    interp_prev = Interpolator(grid, utilde[0], "spline", order)
    p = grid.coords.copy()
    if not backward:
        yield p
    warned = False
    for i in range(len(times) - 1):
        interp_next = Interpolator(grid, utilde[i + 1], "spline", order)
        dt = (times[i + 1] - times[i]) / substeps

        mids = {}

        def vel(q, theta):
            if theta == 0.0:
                return interp_prev(q)
            if theta == 1.0:
                return interp_next(q)
            if theta not in mids:
                mids[theta] = Interpolator.blend(interp_prev, interp_next, theta)
            return mids[theta](q)

        if not warned and max(np.abs(utilde[i]).max(), np.abs(utilde[i + 1]).max()) * dt > h:
            warnings.warn("CFL number exceeds one in the particle ODE", stacklevel=3)
            warned = True
        if backward:
            q = grid.coords.copy()
            for j in range(substeps):
                th = 1.0 - j / substeps
                dth = 1.0 / substeps
                k1 = vel(q, th)
                k2 = vel(q - 0.5 * dt * k1, th - 0.5 * dth)
                k3 = vel(q - 0.5 * dt * k2, th - 0.5 * dth)
                k4 = vel(q - dt * k3, max(th - dth, 0.0))
                q = q - dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            yield q
        else:
            for j in range(substeps):
                th = j / substeps
                dth = 1.0 / substeps
                k1 = vel(p, th)
                k2 = vel(p + 0.5 * dt * k1, th + 0.5 * dth)
                k3 = vel(p + 0.5 * dt * k2, th + 0.5 * dth)
                k4 = vel(p + dt * k3, min(th + dth, 1.0))
                p = p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(p)):
                raise NumericalError(f"particle ODE blew up at t={times[i + 1]}")
            yield p
        interp_prev = interp_next


def solve_particle_ode(utilde: VelocityTrajectory, T: float | None = None, substeps: int = 1,
                       order: int = 5) -> list[DiffeoMap]:
    """Y_t with dY/dt = u~_t(Y), Y_0 = id, at every snapshot time up to ``T``."""
    grid = utilde.grid
    stop = len(utilde) if T is None else int(np.searchsorted(utilde.times, T, side="right"))
    x = grid.coords
    return [DiffeoMap(grid, p - x) for p in
            _rk4_positions(grid, utilde.values[:stop], utilde.times[:stop], substeps, order)]


def back_to_labels(phi: DiffeoMap, Y: DiffeoMap, initial: DiffeoMap | None = None,
                   cfg: LagrangianConfig | None = None) -> tuple[DiffeoMap, DiffeoMap]:
    """Return (X, A) with X = phi o Y and A = X^-1.

    The Jacobian of A is the chain-rule inverse (grad X)^-1 evaluated at A.
    """
    cfg = cfg or LagrangianConfig()
    X = compose_maps(phi, Y, cfg.interp_order)
    A = invert_map(X, cfg.inversion_tol, cfg.inversion_max_iter, cfg.inversion_method,
                   initial=initial, order=cfg.interp_order)
    JX_at_A = Interpolator(X.grid, X.jacobian, "spline", cfg.interp_order)(A.positions)
    return X, DiffeoMap(X.grid, A.displacement, _matinv(JX_at_A))


def _check_inputs(u: VelocityTrajectory, basis: NoiseBasis, path: BrownianPath):
    if basis.grid != u.grid:
        raise ValueError("basis and velocity live on different grids")
    if path.m != basis.m:
        raise ValueError("path and basis have different numbers of components")
    if len(u) > path.N + 1 or not np.allclose(u.times, path.mesh[:len(u)], rtol=0, atol=1e-12):
        raise ValueError("velocity snapshots must sit on the Brownian mesh")


def lagrangian_sweep(u: VelocityTrajectory, basis: NoiseBasis, path: BrownianPath,
                     cfg: LagrangianConfig | None = None):
    """Yield (i, phi_i, Y_i, X_i, A_i) for every snapshot of ``u``."""
    cfg = cfg or LagrangianConfig()
    _check_inputs(u, basis, path)
    grid = u.grid
    x = grid.coords
    nt = len(u)
    phis = []
    utilde = np.empty_like(u.values)
    for i, p in enumerate(noise_flow_positions(basis, path, nt - 1)):
        phi = DiffeoMap(grid, p - x)
        phis.append(phi)
        utilde[i] = pull_back_velocity(u.values[i], phi, "spline", cfg.interp_order)
    A_prev = None
    for i, q in enumerate(_rk4_positions(grid, utilde, u.times, cfg.substeps, cfg.interp_order)):
        Y = DiffeoMap(grid, q - x)
        X, A = back_to_labels(phis[i], Y, A_prev, cfg)
        A_prev = A
        yield i, phis[i], Y, X, A


def weber_expression(grid: TorusGrid, A: DiffeoMap, u0_interp: Interpolator, dealiased: bool = True):
    w = leray_project(grid, matvec(transpose(A.jacobian), u0_interp(A.positions)))
    return dealias(grid, w) if dealiased else w


def apply_S(u: VelocityTrajectory, u0: np.ndarray, basis: NoiseBasis, path: BrownianPath,
            cfg: LagrangianConfig | None = None) -> VelocityTrajectory:
    """One application of the fixed-point map S."""
    cfg = cfg or LagrangianConfig()
    grid = u.grid
    u0i = Interpolator(grid, u0, "spline", cfg.interp_order)
    out = np.empty_like(u.values)
    for i, _phi, _Y, _X, A in lagrangian_sweep(u, basis, path, cfg):
        out[i] = weber_expression(grid, A, u0i, cfg.dealias)
        if not np.all(np.isfinite(out[i])):
            raise NumericalError(f"non-finite velocity at t={u.times[i]}")
    return VelocityTrajectory(grid, u.times, out, u.s)


# ---------------------------------------------------------------------------
# Picard iteration

def _picard_window(u0, basis, path, cfg: PicardConfig, lcfg: LagrangianConfig, report: WindowReport):
    grid = basis.grid
    u = VelocityTrajectory.constant(grid, path.mesh, u0, cfg.s)
    prev = None
    strikes = 0
    for _ in range(cfg.max_iters):
        t0 = time.perf_counter()
        try:
            Su = apply_S(u, u0, basis, path, lcfg)
        except (InversionError, ResolutionError) as e:
            # the iterate deforms too much over this window to be inverted
            report.decision, report.reason = "shrunk", f"map inversion failed: {e}"
            return None
        inc = Su.distance(u, 0.0)
        norm_s = Su.sigma_norm(cfg.s)
        report.increments.append(inc)
        report.sigma_s_norms.append(norm_s)
        report.wall_seconds.append(time.perf_counter() - t0)
        if prev is not None and prev > 0:
            ratio = inc / prev
            report.ratios.append(ratio)
            strikes = strikes + 1 if ratio >= cfg.ratio_max else 0
        prev = inc
        u = Su
        log.debug("picard window t0=%g L=%g it=%d inc=%.3e", report.start, report.length,
                  report.iterations, inc)
        if norm_s > report.M:
            report.decision, report.reason = "shrunk", f"ball violation ||u||_s={norm_s:.4g} > M"
            return None
        if inc <= report.tol:
            report.decision = "accepted"
            return u
        if strikes >= cfg.patience:
            report.decision, report.reason = "shrunk", "persistent contraction ratio >= ratio_max"
            return None
    report.decision, report.reason = "shrunk", "max_iters reached"
    return None


def picard_solve(u0: np.ndarray, basis: NoiseBasis, path: BrownianPath, cfg: PicardConfig | None = None,
                 lcfg: LagrangianConfig | None = None, T: float | None = None):
    """Fixed point of S on [0, T], with window halving and continuation.

    Returns ``(trajectory, report)``; the trajectory covers [0, T] if
    continuation is enabled, otherwise the first accepted window.
    """
    cfg = cfg or PicardConfig()
    lcfg = lcfg or LagrangianConfig()
    grid = basis.grid
    T = path.T if T is None else T
    nsteps = path.index_of(T)
    if nsteps < 1:
        raise ValueError("horizon must contain at least one step")
    dt = T / nsteps
    T_min = T / 64 if cfg.T_min is None else cfg.T_min
    if T_min > T:
        raise ValueError(f"T_min={T_min} exceeds the horizon T={T}")
    if abs(float(np.abs(divergence(grid, u0)).max())) > 1e-8:
        raise ValueError("initial velocity is not divergence-free")
    report = IterationReport()
    window = nsteps if cfg.window is None else max(1, int(round(cfg.window / dt)))
    start = 0
    values = [u0.copy()]
    u_start = u0.copy()
    while start < nsteps:
        length = min(window, nsteps - start)
        sub = path.window(start, start + length)
        l2 = l2_norm(grid, u_start)
        M = cfg.M if cfg.M is not None else 2 * sobolev_norm(grid, u_start, cfg.s)
        wr = WindowReport(float(path.mesh[start]), float(sub.T), float(M), cfg.tol * l2)
        report.windows.append(wr)
        traj = _picard_window(u_start, basis, sub, cfg, lcfg, wr)
        if traj is None:
            if length // 2 < 1 or (length // 2) * dt < T_min * (1 - 1e-12):
                raise PicardNonconvergence(
                    f"window at t={wr.start:g} would shrink below T_min={T_min:g}", report)
            window = length // 2
            log.info("shrinking Picard window to %g (%s)", window * dt, wr.reason)
            continue
        values.extend(traj.values[1:])
        start += length
        u_start = traj.values[-1]
        if not cfg.continuation:
            break
    times = path.mesh[:len(values)]
    return VelocityTrajectory(grid, times, np.array(values), cfg.s), report


# ---------------------------------------------------------------------------
# diagnostics on converged solutions

def weber_residuals(u: VelocityTrajectory, u0: np.ndarray, basis: NoiseBasis, path: BrownianPath,
                    cfg: LagrangianConfig | None = None) -> np.ndarray:
    """||P[(grad X_t)^T u(t) o X_t] - u_0||_L2 / ||u_0||_L2 at every snapshot."""
    cfg = cfg or LagrangianConfig()
    grid = u.grid
    norm0 = l2_norm(grid, u0) or 1.0
    out = np.empty(len(u))
    for i, _phi, _Y, X, _A in lagrangian_sweep(u, basis, path, cfg):
        ui = Interpolator(grid, u.values[i], "spline", cfg.interp_order)
        w = leray_project(grid, matvec(transpose(X.jacobian), ui(X.positions)))
        out[i] = l2_norm(grid, w - u0) / norm0
    return out


def material_residuals(u: VelocityTrajectory, u0: np.ndarray, basis: NoiseBasis, path: BrownianPath,
                       cfg: LagrangianConfig | None = None) -> np.ndarray:
    """max |v(t, X_t(x)) - u_0(x)| with v = u_0 o A_t, per snapshot."""
    cfg = cfg or LagrangianConfig()
    grid = u.grid
    u0i = Interpolator(grid, u0, "spline", cfg.interp_order)
    out = np.empty(len(u))
    for i, _phi, _Y, X, A in lagrangian_sweep(u, basis, path, cfg):
        v = u0i(A.positions)
        out[i] = float(np.abs(Interpolator(grid, v, "spline", cfg.interp_order)(X.positions) - u0).max())
    return out


def vorticity_norms(u: VelocityTrajectory) -> np.ndarray:
    from .spectral import curl2d
    return np.array([l2_norm(u.grid, curl2d(u.grid, v)) for v in u.values])


# ---------------------------------------------------------------------------
# transport equations

@dataclass
class TransportProblem:
    """d_t f + (u~ . grad) f = g with g = 0 or g = -u~."""

    f0: np.ndarray
    velocity: VelocityTrajectory
    forcing: str = "zero"  # or "minus_velocity"

    def __post_init__(self):
        if self.forcing not in ("zero", "minus_velocity"):
            raise ValueError("forcing must be 'zero' or 'minus_velocity'")
        if self.forcing == "minus_velocity" and self.f0.shape != self.velocity.values[0].shape:
            raise ValueError("forcing -u~ needs a vector unknown")


def solve_transport(problem: TransportProblem, T: float | None = None, method: str = "semi-lagrangian",
                    substeps: int = 1, order: int = 5) -> np.ndarray:
    """Grid solution of the transport problem at every snapshot up to ``T``.

    ``semi-lagrangian``: f(t_{i+1}, x) = f(t_i, foot) + forcing integral,
    feet from backward RK4 characteristics. ``spectral``: method of lines
    with dealiased pseudo-spectral advection and classical RK4.
    """
    vel = problem.velocity
    grid = vel.grid
    stop = len(vel) if T is None else int(np.searchsorted(vel.times, T, side="right"))
    times = vel.times[:stop]
    forced = problem.forcing == "minus_velocity"
    f = np.array(problem.f0, dtype=float)
    out = [f.copy()]
    if method == "semi-lagrangian":
        x = grid.coords
        for foot in _rk4_positions(grid, vel.values[:stop], times, substeps, order, backward=True):
            f = Interpolator(grid, f, "spline", order)(foot)
            if forced:
                f = f - (x - foot)
            out.append(f)
    elif method == "spectral":
        for i in range(stop - 1):
            dt = (times[i + 1] - times[i]) / substeps
            for j in range(substeps):
                th0 = j / substeps

                def rhs(g, th):
                    w = (1 - th) * vel.values[i] + th * vel.values[i + 1]
                    r = -advect(grid, w, g, dealiased=True)
                    return r - w if forced else r

                dth = 1.0 / substeps
                k1 = rhs(f, th0)
                k2 = rhs(f + 0.5 * dt * k1, th0 + 0.5 * dth)
                k3 = rhs(f + 0.5 * dt * k2, th0 + 0.5 * dth)
                k4 = rhs(f + dt * k3, th0 + dth)
                f = f + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            out.append(f)
    else:
        raise ValueError(f"unknown transport method {method!r}")
    return np.array(out)


def characteristic_transport(velocity: VelocityTrajectory, u0: np.ndarray, substeps: int = 1,
                             order: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """(eta, v) with eta = Y_t^-1 - x and v = u_0(Y_t^-1), from the particle ODE."""
    grid = velocity.grid
    u0i = Interpolator(grid, u0, "spline", order)
    eta, v = [], []
    prev = None
    for Y in solve_particle_ode(velocity, substeps=substeps, order=order):
        Yinv = invert_map(Y, initial=prev, order=order)
        prev = Yinv
        eta.append(Yinv.displacement)
        v.append(u0i(Yinv.positions))
    return np.array(eta), np.array(v)


def growth_monitor(f: np.ndarray, velocity: VelocityTrajectory, s: float,
                   forcing: np.ndarray | None = None) -> dict:
    """Fit the smallest constant C making the exponential H^s envelope hold.

    Envelope (from time 0):
        ||f(t)||_s <= (||f(0)||_s + G/(C U)) exp(C t U) - G/(C U),
    U = sup ||u~||_s, G = sup ||g||_s (G = 0 without forcing).
    """
    grid = velocity.grid
    times = velocity.times[:len(f)]
    norms = np.array([sobolev_norm(grid, fi, s) for fi in f])
    U = velocity.sigma_norm(s)
    G = 0.0 if forcing is None else max(sobolev_norm(grid, g, s) for g in forcing)

    def envelope(C, t):
        if G == 0:
            return norms[0] * np.exp(C * t * U)
        return (norms[0] + G / (C * U)) * np.exp(C * t * U) - G / (C * U)

    C_fit = 0.0
    if U > 0:
        for t, nt in zip(times[1:], norms[1:]):
            if nt <= envelope(1e-12, t) * (1 + 1e-12):
                continue
            lo, hi = 1e-12, 1.0
            while envelope(hi, t) < nt:
                hi *= 2
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if envelope(mid, t) < nt else (lo, mid)
            C_fit = max(C_fit, hi)
    env = np.array([envelope(max(C_fit, 1e-12), t) for t in times]) if U > 0 else np.full(len(times), norms[0])
    return {"norms": norms, "envelope": env, "C_fit": C_fit, "U": U, "G": G,
            "satisfied": bool(np.all(norms <= env * (1 + 1e-9) + 1e-14))}


def stability_ratios(f1: np.ndarray, f2: np.ndarray, v1: VelocityTrajectory, v2: VelocityTrajectory) -> np.ndarray:
    """||f1(t) - f2(t)||_L2 / (t ||u1 - u2||_{Sigma_0}) for t > 0."""
    grid = v1.grid
    du = v1.distance(v2, 0.0)
    times = v1.times[:len(f1)]
    out = np.zeros(len(times) - 1)
    if du == 0:
        return out
    for i in range(1, len(times)):
        out[i - 1] = l2_norm(grid, f1[i] - f2[i]) / (times[i] * du)
    return out
