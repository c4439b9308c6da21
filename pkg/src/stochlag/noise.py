"""Brownian drivers and divergence-free noise fields.

Random streams
--------------
Every path is generated by a Philox counter-based generator keyed by
``SeedSequence(seed, spawn_key=(level,))``: level 0 draws the coarse
increments, level ``L`` draws the bridge values inserted by the ``L``-th
refinement. Output is therefore bit-identical for identical arguments and
does not depend on thread count.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .spectral import TorusGrid, divergence, sobolev_norm


def _rng(seed: int, level: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(int(level),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class BrownianPath:
    """``m`` independent Brownian components on a fixed time mesh."""

    mesh: np.ndarray
    values: np.ndarray  # (m, N+1)
    seed: int = 0
    level: int = 0

    def __post_init__(self):
        mesh = np.asarray(self.mesh, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if mesh.ndim != 1 or mesh.size < 2 or np.any(np.diff(mesh) <= 0):
            raise ValueError("mesh must be strictly increasing with at least two points")
        if values.shape[1] != mesh.size:
            raise ValueError("values must have one column per mesh point")
        object.__setattr__(self, "mesh", mesh)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.mesh.size - 1

    @property
    def T(self) -> float:
        return float(self.mesh[-1])

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        i = int(np.argmin(np.abs(self.mesh - t)))
        if abs(self.mesh[i] - t) > atol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a mesh point of the path")
        return i

    def window(self, start: int, stop: int) -> "BrownianPath":
        """Sub-path on mesh[start:stop+1], shifted to start at (0, 0)."""
        if not 0 <= start < stop <= self.N:
            raise ValueError("invalid window")
        mesh = self.mesh[start:stop + 1] - self.mesh[start]
        vals = self.values[:, start:stop + 1] - self.values[:, start:start + 1]
        return BrownianPath(mesh, vals, self.seed, self.level)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"W{j + 1}" for j in range(self.m)])
            for i, t in enumerate(self.mesh):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.values[:, i]])

    @classmethod
    def from_csv(cls, path, seed: int = 0, level: int = 0) -> "BrownianPath":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        if header[0] != "t" or header[1:] != [f"W{j + 1}" for j in range(len(header) - 1)]:
            raise ValueError(f"bad path header {header}")
        return cls(body[:, 0], body[:, 1:].T, seed, level)


def sample_brownian(m: int, T: float, N: int, seed: int) -> BrownianPath:
    if N < 1:
        raise ValueError("need at least one step")
    if not T > 0:
        raise ValueError("horizon must be positive")
    if m < 0:
        raise ValueError("component count must be nonnegative")
    dt = T / N
    dW = _rng(seed, 0).standard_normal((m, N)) * np.sqrt(dt)
    values = np.zeros((m, N + 1))
    values[:, 1:] = np.cumsum(dW, axis=1)
    return BrownianPath(np.linspace(0.0, T, N + 1), values, seed, 0)


def refine(path: BrownianPath, factor: int) -> BrownianPath:
    """Insert ``factor - 1`` Brownian-bridge points in every mesh interval.

    Existing mesh values are copied unchanged; new points are drawn
    left-to-right conditioned on the previous point and the right knot.
    """
    factor = int(factor)
    if factor < 2:
        raise ValueError("refinement factor must be >= 2")
    level = path.level + 1
    rng = _rng(path.seed, level)
    a, b = path.mesh[:-1], path.mesh[1:]
    Wa, Wb = path.values[:, :-1], path.values[:, 1:]
    N = path.N
    mesh = np.empty(N * factor + 1)
    values = np.empty((path.m, N * factor + 1))
    mesh[::factor] = path.mesh
    values[:, ::factor] = path.values
    z = rng.standard_normal((factor - 1, path.m, N))
    left_t, left_w = a, Wa
    for j in range(1, factor):
        t = a + (b - a) * j / factor
        frac = (t - left_t) / (b - left_t)
        mean = left_w + frac * (Wb - left_w)
        var = (t - left_t) * (b - t) / (b - left_t)
        w = mean + np.sqrt(var) * z[j - 1]
        mesh[j::factor] = t
        values[:, j::factor] = w
        left_t, left_w = t, w
    return BrownianPath(mesh, values, path.seed, level)


# ---------------------------------------------------------------------------
# noise fields

@dataclass(frozen=True)
class NoiseMode:
    """Analytic descriptor of one noise field.

    kind ``"trig"``:     a * e * cos(k.x + phase), e = (k2, -k1)/|k| in 2D or
                         (k x p)/|k x p| in 3D with polarization p.
    kind ``"constant"``: the constant vector ``vector``.
    kind ``"cellular"``: 2D only, a * (sin(q x1) cos(q x2), -cos(q x1) sin(q x2))
                         with q = wavevector[0].
    """

    kind: str = "trig"
    wavevector: tuple = ()
    amplitude: float = 1.0
    phase: float = 0.0
    polarization: tuple | None = None
    vector: tuple | None = None

    @classmethod
    def from_dict(cls, desc: dict) -> "NoiseMode":
        desc = dict(desc)
        for key in ("wavevector", "polarization", "vector"):
            if desc.get(key) is not None:
                desc[key] = tuple(desc[key])
        return cls(**desc)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "amplitude": self.amplitude}
        if self.kind == "constant":
            out["vector"] = list(self.vector)
        else:
            out["wavevector"] = list(self.wavevector)
            out["phase"] = self.phase
            if self.polarization is not None:
                out["polarization"] = list(self.polarization)
        return out


@dataclass(frozen=True)
class _ModeEval:
    kind: str
    k: np.ndarray
    e: np.ndarray
    amp: float
    phase: float


def _compile_mode(mode: NoiseMode, d: int, n: int) -> _ModeEval:
    if mode.kind == "constant":
        if mode.vector is None or len(mode.vector) != d:
            raise ValueError("constant mode needs a d-vector")
        return _ModeEval("constant", np.zeros(d), np.asarray(mode.vector, float), 1.0, 0.0)
    k = np.asarray(mode.wavevector, dtype=float)
    if mode.kind == "cellular":
        if d != 2 or k.size < 1 or k[0] <= 0 or k[0] != int(k[0]):
            raise ValueError("cellular mode needs d=2 and a positive integer wavenumber")
        if k[0] >= n / 2:
            raise ValueError("wavenumber outside the grid band")
        return _ModeEval("cellular", k[:1], np.zeros(d), float(mode.amplitude), 0.0)
    if mode.kind != "trig":
        raise ValueError(f"unknown noise mode kind {mode.kind!r}")
    if k.shape != (d,) or np.any(k != np.round(k)):
        raise ValueError("wavevector must be an integer d-vector")
    if not np.any(k):
        raise ValueError("zero wavevector; use a 'constant' mode for constant fields")
    if np.any(np.abs(k) >= n / 2):
        raise ValueError("wavevector outside the grid band")
    if d == 2:
        e = np.array([k[1], -k[0]]) / np.linalg.norm(k)
    else:
        if mode.polarization is not None:
            p = np.asarray(mode.polarization, dtype=float)
        else:
            p = np.eye(3)[int(np.argmin(np.abs(k)))]
        e = np.cross(k, p)
        if np.linalg.norm(e) < 1e-12:
            raise ValueError("polarization parallel to wavevector")
        e /= np.linalg.norm(e)
    return _ModeEval("trig", k, e, float(mode.amplitude), float(mode.phase))


class NoiseBasis:
    """Finite family sigma_1..sigma_m of divergence-free fields with analytic evaluation."""

    def __init__(self, grid: TorusGrid, modes):
        self.grid = grid
        self.modes = tuple(m if isinstance(m, NoiseMode) else NoiseMode.from_dict(m) for m in modes)
        self._compiled = [_compile_mode(m, grid.d, grid.n) for m in self.modes]

    @property
    def m(self) -> int:
        return len(self.modes)

    @property
    def is_constant(self) -> bool:
        return all(m.kind == "constant" for m in self.modes)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """sigma_j at points (d, ...) -> (m, d, ...)."""
        points = np.asarray(points, dtype=float)
        d = self.grid.d
        out = np.zeros((self.m, d, *points.shape[1:]))
        for j, c in enumerate(self._compiled):
            if c.kind == "constant":
                out[j] = c.e.reshape(d, *([1] * (points.ndim - 1)))
            elif c.kind == "trig":
                arg = np.tensordot(c.k, points, axes=1) + c.phase
                out[j] = c.amp * c.e.reshape(d, *([1] * (points.ndim - 1))) * np.cos(arg)
            else:
                q = c.k[0]
                s1, c1 = np.sin(q * points[0]), np.cos(q * points[0])
                s2, c2 = np.sin(q * points[1]), np.cos(q * points[1])
                out[j, 0] = c.amp * s1 * c2
                out[j, 1] = -c.amp * c1 * s2
        return out

    def evaluate_jacobian(self, points: np.ndarray) -> np.ndarray:
        """d sigma_j,i / d x_l at points -> (m, d, d, ...)."""
        points = np.asarray(points, dtype=float)
        d = self.grid.d
        ones = [1] * (points.ndim - 1)
        out = np.zeros((self.m, d, d, *points.shape[1:]))
        for j, c in enumerate(self._compiled):
            if c.kind == "trig":
                arg = np.tensordot(c.k, points, axes=1) + c.phase
                out[j] = -c.amp * np.outer(c.e, c.k).reshape(d, d, *ones) * np.sin(arg)
            elif c.kind == "cellular":
                q, a = c.k[0], c.amp
                s1, c1 = np.sin(q * points[0]), np.cos(q * points[0])
                s2, c2 = np.sin(q * points[1]), np.cos(q * points[1])
                out[j, 0, 0] = a * q * c1 * c2
                out[j, 0, 1] = -a * q * s1 * s2
                out[j, 1, 0] = a * q * s1 * s2
                out[j, 1, 1] = -a * q * c1 * c2
        return out

    @cached_property
    def fields(self) -> np.ndarray:
        """Grid samples, shape (m, d, n, ..., n)."""
        return self.evaluate(self.grid.coords)

    def resample(self, grid: TorusGrid) -> "NoiseBasis":
        return NoiseBasis(grid, self.modes)

    def max_divergence(self) -> float:
        if self.m == 0:
            return 0.0
        return max(float(np.abs(divergence(self.grid, f)).max()) for f in self.fields)

    def smoothness_proxy(self, s: float = 5.0) -> float:
        """sum_j ||sigma_j||_s^2."""
        return float(sum(sobolev_norm(self.grid, f, s) ** 2 for f in self.fields))


def make_trig_basis(grid: TorusGrid, modes) -> NoiseBasis:
    """Build a basis from descriptors.

    Each entry may be a ``NoiseMode``, a descriptor dict, or a
    ``(wavevector, amplitude)`` pair for a trig mode with zero phase.
    """
    parsed = []
    for m in modes:
        if isinstance(m, (NoiseMode, dict)):
            parsed.append(m)
        else:
            k, a = m
            parsed.append(NoiseMode("trig", tuple(k), float(a)))
    return NoiseBasis(grid, parsed)


def constant_basis(grid: TorusGrid, vector) -> NoiseBasis:
    return NoiseBasis(grid, [NoiseMode("constant", vector=tuple(float(v) for v in vector))])
