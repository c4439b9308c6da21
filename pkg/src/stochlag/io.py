"""Raw field files, trajectory manifests and diagnostics tables."""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .flows import DiffeoMap
from .lagrangian import VelocityTrajectory
from .spectral import TorusGrid

MAGIC = 0x53544C47
_HEADER = struct.Struct("<4I")


class FormatError(ValueError):
    pass


def write_field(path, f: np.ndarray) -> None:
    """Write a (ncomp, n, ..., n) field; a bare scalar field (n, ..., n) is stored with ncomp=1.

    Values are little-endian doubles, one component after another, with the
    first coordinate index varying fastest.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[-1]
    d = 0
    while d < min(f.ndim, 3) and f.shape[-1 - d] == n:
        d += 1
    if d < 2:
        raise ValueError(f"not a grid field: shape {f.shape}")
    comps = f.reshape(-1, *f.shape[-d:])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, d, n, comps.shape[0]))
        for c in comps:
            fh.write(c.ravel(order="F").astype("<f8").tobytes())


def read_field(path) -> np.ndarray:
    """Inverse of ``write_field``; always returns (ncomp, n, ..., n)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, d, n, ncomp = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08X}")
    if d not in (2, 3):
        raise FormatError(f"{path}: unsupported dimension {d}")
    count = ncomp * n ** d
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise FormatError(f"{path}: expected {count} doubles, found {len(body) / 8:g}")
    data = np.frombuffer(body, dtype="<f8").astype(float)
    return np.stack([c.reshape((n,) * d, order="F") for c in data.reshape(ncomp, -1)])


def write_map(path, m: DiffeoMap) -> None:
    write_field(path, m.displacement)


def read_map(path) -> DiffeoMap:
    disp = read_field(path)
    return DiffeoMap(TorusGrid(disp.ndim - 1, disp.shape[-1]), disp)


# ---------------------------------------------------------------------------
# trajectories

def write_trajectory(out_dir, traj: VelocityTrajectory, *, seed: int, config_hash: str, kind: str,
                     extra: dict | None = None) -> Path:
    """Snapshots as ``u_00000.raw``, ... plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, v in enumerate(traj.values):
        name = f"u_{i:05d}.raw"
        write_field(out / name, v)
        files.append(name)
    manifest = {
        "kind": kind,
        "grid": {"d": traj.grid.d, "n": traj.grid.n},
        "s": traj.s,
        "seed": int(seed),
        "config_hash": config_hash,
        "times": [float(t) for t in traj.times],
        "files": files,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    man = json.loads(path.read_text())
    for key in ("grid", "times", "files", "seed", "config_hash"):
        if key not in man:
            raise FormatError(f"{path}: manifest lacks '{key}'")
    man["_root"] = str(path.parent)
    return man


def load_trajectory(manifest) -> VelocityTrajectory:
    man = manifest if isinstance(manifest, dict) else read_manifest(manifest)
    grid = TorusGrid(man["grid"]["d"], man["grid"]["n"])
    root = Path(man["_root"])
    values = np.array([read_field(root / f) for f in man["files"]])
    return VelocityTrajectory(grid, np.array(man["times"]), values, man.get("s", 3.0))


# ---------------------------------------------------------------------------
# diagnostics

DIAGNOSTIC_COLUMNS = ["time", "energy", "norm_s", "max_divergence", "weber_residual", "vorticity_l2",
                      "picard_iterations"]


def write_rows(path, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v
