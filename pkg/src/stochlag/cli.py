"""Command-line front end: ``stochlag <subcommand> [flags]``.

Exit codes: 0 success, 1 numerical failure, 2 configuration or usage error,
3 comparison mismatch or threshold failure, 4 Picard window shrank below T_min.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import scipy.fft

from . import io
from .config import ConfigError, ExperimentConfig, load
from .errors import NumericalError, PicardNonconvergence
from .eulerian import lie_adjoint, lie_derivative, solve_direct
from .flows import DiffeoMap, exact_noise_flow, invert_map, noise_flow_positions
from .lagrangian import VelocityTrajectory, picard_solve, vorticity_norms, weber_residuals
from .noise import NoiseBasis, NoiseMode, refine, sample_brownian
from .spectral import (TorusGrid, curl2d, divergence, gradient, l2_inner, l2_norm, leray_project,
                       sobolev_norm)

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG, EXIT_MISMATCH, EXIT_PICARD = 0, 1, 2, 3, 4

log = logging.getLogger("stochlag")


class Mismatch(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _config(args) -> ExperimentConfig:
    return load(args.config, {"seed": args.seed, "out": args.out, "threads": args.threads})


def _realizations(cfg: ExperimentConfig):
    """(seed, output dir) per Monte Carlo realization."""
    out = Path(cfg["out"])
    R = cfg["realizations"]
    if R == 1:
        return [(cfg["seed"], out)]
    return [(cfg["seed"] + r, out / f"realization_{r:03d}") for r in range(R)]


def _stride(times: np.ndarray, stride: int) -> np.ndarray:
    idx = list(range(0, times.size, stride))
    if idx[-1] != times.size - 1:
        idx.append(times.size - 1)
    return np.array(idx)


def diagnostics(traj: VelocityTrajectory, weber: np.ndarray | None, iterations: np.ndarray | None) -> list[dict]:
    grid = traj.grid
    vort = vorticity_norms(traj) if grid.d == 2 else None
    norms = traj.norms()
    rows = []
    for i, (t, u) in enumerate(zip(traj.times, traj.values)):
        rows.append({
            "time": float(t),
            "energy": 0.5 * l2_norm(grid, u) ** 2,
            "norm_s": float(norms[i]),
            "max_divergence": float(np.abs(divergence(grid, u)).max()),
            "weber_residual": "" if weber is None else float(weber[i]),
            "vorticity_l2": "" if vort is None else float(vort[i]),
            "picard_iterations": "" if iterations is None else int(iterations[i]),
        })
    return rows


def _snapshot_iterations(times: np.ndarray, report) -> np.ndarray:
    """Picard iterations of the accepted window that produced each snapshot."""
    out = np.zeros(times.size, dtype=int)
    for w in report.accepted:
        out[(times > w.start + 1e-12) & (times <= w.start + w.length + 1e-12)] = w.iterations
    if report.accepted:
        out[0] = report.accepted[0].iterations
    return out


def _write_run(out: Path, cfg: ExperimentConfig, seed: int, kind: str, traj: VelocityTrajectory,
               path, rows: list[dict], summary: dict):
    out.mkdir(parents=True, exist_ok=True)
    keep = _stride(traj.times, cfg["output_stride"])
    sub = VelocityTrajectory(traj.grid, traj.times[keep], traj.values[keep], traj.s)
    io.write_trajectory(out / "trajectory", sub, seed=seed, config_hash=cfg.hash, kind=kind)
    io.write_rows(out / "diagnostics.csv", [rows[i] for i in keep], io.DIAGNOSTIC_COLUMNS)
    if path.m:
        path.to_csv(out / "path.csv")
    (out / "config.json").write_text(cfg.to_json())
    summary = {"kind": kind, "seed": seed, "config_hash": cfg.hash} | summary
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def _energy_drift(rows):
    E = np.array([r["energy"] for r in rows])
    return float(np.abs(E - E[0]).max() / E[0]) if E[0] > 0 else float(np.abs(E).max())


# ---------------------------------------------------------------------------
# subcommands

def cmd_run_lagrangian(args) -> int:
    cfg = _config(args)
    grid, basis, u0 = cfg.grid, cfg.basis(), cfg.initial_field()
    T = cfg["T"]
    for seed, out in _realizations(cfg):
        path = cfg.path(seed)
        if cfg.steps == 0:
            traj = VelocityTrajectory(grid, [0.0], u0[None].copy(), cfg["s"])
            report = None
        else:
            try:
                traj, report = picard_solve(u0, basis, path, cfg.picard(), cfg.lagrangian(), T)
            except PicardNonconvergence as e:
                out.mkdir(parents=True, exist_ok=True)
                e.report.to_json(out / "iterations.json")
                raise
        weber = (weber_residuals(traj, u0, basis, path, cfg.lagrangian())
                 if cfg["diagnostics"]["weber"] and len(traj) > 1 else None)
        its = None if report is None else _snapshot_iterations(traj.times, report)
        rows = diagnostics(traj, weber, its)
        if report is not None:
            out.mkdir(parents=True, exist_ok=True)
            report.to_json(out / "iterations.json")
        _write_run(out, cfg, seed, "lagrangian", traj, path, rows, {
            "iterations": 0 if report is None else report.iterations,
            "shrinks": 0 if report is None else report.shrinks,
            "energy_drift": _energy_drift(rows),
            "max_weber_residual": None if weber is None else float(weber.max()),
        })
    return EXIT_OK


def cmd_run_direct(args) -> int:
    cfg = _config(args)
    grid, u0 = cfg.grid, cfg.initial_field()
    basis = cfg.basis() if cfg["noise"] else None
    for seed, out in _realizations(cfg):
        path = cfg.path(seed)
        traj = solve_direct(u0, basis, path, cfg["T"], cfg.direct())
        weber = None
        if cfg["diagnostics"]["weber"] and len(traj) > 1:
            weber = weber_residuals(traj, traj.values[0], basis or NoiseBasis(grid, []), path, cfg.lagrangian())
        rows = diagnostics(traj, weber, None)
        _write_run(out, cfg, seed, "direct", traj, path, rows, {
            "energy_drift": _energy_drift(rows),
            "max_weber_residual": None if weber is None else float(weber.max()),
        })
    return EXIT_OK


def compare_trajectories(a: VelocityTrajectory, b: VelocityTrajectory) -> list[dict]:
    grid = a.grid
    s1 = a.s - 1
    rows = []
    for t, u, v in zip(a.times, a.values, b.values):
        diff = u - v
        ref = l2_norm(grid, v)
        rows.append({
            "time": float(t),
            "l2": l2_norm(grid, diff),
            "relative_l2": l2_norm(grid, diff) / ref if ref > 0 else l2_norm(grid, diff),
            "hs_minus_1": sobolev_norm(grid, diff, s1),
            "sup": float(np.abs(diff).max()),
        })
    return rows


def cmd_compare(args) -> int:
    try:
        ma, mb = io.read_manifest(args.a), io.read_manifest(args.b)
    except (OSError, ValueError) as e:
        raise Mismatch(str(e)) from None
    if ma["grid"] != mb["grid"]:
        raise Mismatch(f"grids differ: {ma['grid']} vs {mb['grid']}")
    ta, tb = np.array(ma["times"]), np.array(mb["times"])
    if ta.shape != tb.shape or np.abs(ta - tb).max() > 1e-12:
        raise Mismatch("snapshot times differ")
    if ma["seed"] != mb["seed"]:
        raise Mismatch(f"seeds differ: {ma['seed']} vs {mb['seed']}")
    rows = compare_trajectories(io.load_trajectory(ma), io.load_trajectory(mb))
    worst = {k: max(r[k] for r in rows) for k in ("l2", "relative_l2", "hs_minus_1", "sup")}
    passed = args.threshold is None or worst["relative_l2"] <= args.threshold
    summary = {"a": ma["kind"] if "kind" in ma else args.a, "b": mb.get("kind", args.b),
               "config_hash_a": ma["config_hash"], "config_hash_b": mb["config_hash"],
               "threshold": args.threshold, "passed": passed} | {f"sup_{k}": v for k, v in worst.items()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_rows(out / "compare.csv", rows)
        (out / "compare.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    print(("PASS" if passed else "FAIL") + f" sup relative L2 = {worst['relative_l2']:.3e}"
          + ("" if args.threshold is None else f" (threshold {args.threshold:g})"))
    return EXIT_OK if passed else EXIT_MISMATCH


def fit_order(steps, errors) -> float:
    """Least-squares slope of log(error) against log(step); nan if errors sit at round-off."""
    steps, errors = np.asarray(steps, float), np.asarray(errors, float)
    ok = errors > 1e-13
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(steps[ok]), np.log(errors[ok]), 1)[0])


def _restrict(u: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Spectral truncation of a fine-grid field onto ``grid`` (same torus)."""
    n_f = u.shape[-1]
    if n_f == grid.n:
        return u
    uh = np.fft.fftn(u, axes=tuple(range(1, u.ndim))) / n_f ** grid.d
    k = np.fft.fftfreq(grid.n, 1.0 / grid.n).astype(int)
    sel = np.ix_(*([range(u.shape[0])] + [k % n_f] * grid.d))
    return np.real(np.fft.ifftn(uh[sel], axes=tuple(range(1, u.ndim)))) * grid.n ** grid.d


def convergence_study(cfg: ExperimentConfig, levels: int, target: str = "solution", solver: str = "direct"):
    """Errors at time T against the finest level (or a closed form) under dt halving and n doubling."""
    if levels < 2:
        raise ConfigError("--levels must be at least 2")
    if cfg.steps == 0:
        raise ConfigError("T: convergence needs a positive horizon")
    T, dt0 = cfg["T"], cfg["dt"]
    base = cfg.path()
    rows = []

    def solution(grid, path):
        basis = NoiseBasis(grid, cfg.basis().modes)
        u0 = cfg.initial_field(grid)
        if solver == "lagrangian":
            traj, _ = picard_solve(u0, basis, path, cfg.picard(), cfg.lagrangian(), T)
        else:
            traj = solve_direct(u0, basis if basis.m else None, path, T, cfg.direct())
        return traj.values[-1]

    def flow(grid, path):
        basis = NoiseBasis(grid, cfg.basis().modes)
        for p in noise_flow_positions(basis, path, path.index_of(T)):
            pass
        return p - grid.coords

    run = flow if target == "flow" else solution
    # time refinement on the base grid, all levels sharing one Brownian path
    grid = cfg.grid
    paths = [refine(base, 2 ** l) if l else base for l in range(levels)]
    results = [run(grid, p) for p in paths]
    exact = exact_noise_flow(cfg.basis(), paths[-1], T) if target == "flow" else None
    ref = exact.displacement if exact is not None else results[-1]
    used = levels if exact is not None else levels - 1
    errs = [l2_norm(grid, results[l] - ref) for l in range(used)]
    steps = [dt0 / 2 ** l for l in range(used)]
    for l in range(used):
        rows.append({"axis": "dt", "level": l, "dt": steps[l], "n": grid.n, "error": errs[l]})
    order_dt = fit_order(steps, errs)
    # space refinement at the base step
    order_n = float("nan")
    if target == "solution":
        grids = [TorusGrid(grid.d, grid.n * 2 ** l) for l in range(levels)]
        sols = [run(g, base) for g in grids]
        fine = _restrict(sols[-1], grid)
        errs_n = [l2_norm(grid, _restrict(sols[l], grid) - fine) for l in range(levels - 1)]
        for l in range(levels - 1):
            rows.append({"axis": "n", "level": l, "dt": dt0, "n": grids[l].n, "error": errs_n[l]})
        order_n = fit_order([1.0 / g.n for g in grids[:-1]], errs_n)
    reference = "closed-form" if exact is not None else "finest-level"
    return rows, {"target": target, "reference": reference, "order_dt": order_dt, "order_n": order_n}


def cmd_convergence(args) -> int:
    cfg = _config(args)
    rows, summary = convergence_study(cfg, args.levels, args.target, args.solver)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_rows(out / "convergence.csv", rows, ["axis", "level", "dt", "n", "error"])
    summary = {"seed": cfg["seed"], "config_hash": cfg.hash, "levels": args.levels} | summary
    (out / "convergence.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_flow_demo(args) -> int:
    """Noise flow phi_t on the snapshot mesh: maps as raw files plus a diagnostics table."""
    cfg = _config(args)
    grid, basis = cfg.grid, cfg.basis()
    if basis.m == 0:
        raise ConfigError("noise: flow-demo needs at least one noise field")
    out = Path(cfg["out"])
    (out / "maps").mkdir(parents=True, exist_ok=True)
    path = cfg.path()
    keep = set(_stride(path.mesh[:cfg.steps + 1], cfg["output_stride"]).tolist())
    rows, files, times = [], [], []
    prev_inv = None
    for i, p in enumerate(noise_flow_positions(basis, path, cfg.steps)):
        if i not in keep:
            continue
        m = DiffeoMap(grid, p - grid.coords)
        inv = invert_map(m, initial=prev_inv, order=cfg["lagrangian"].get("interp_order", 5))
        prev_inv = inv
        exact = exact_noise_flow(basis, path, path.mesh[i])
        name = f"phi_{i:05d}.raw"
        io.write_map(out / "maps" / name, m)
        files.append(name)
        times.append(float(path.mesh[i]))
        det = m.determinant
        rows.append({
            "time": float(path.mesh[i]),
            "det_min": float(det.min()),
            "det_max": float(det.max()),
            "max_displacement": float(np.abs(m.displacement).max()),
            "inversion_residual": float(np.abs(inv(m.positions) - grid.coords).max()),
            "closed_form_error": "" if exact is None else float(np.abs(m.displacement - exact.displacement).max()),
        })
    manifest = {"kind": "flow", "grid": {"d": grid.d, "n": grid.n}, "seed": cfg["seed"],
                "config_hash": cfg.hash, "times": times, "files": files}
    (out / "maps" / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    io.write_rows(out / "flow.csv", rows)
    path.to_csv(out / "path.csv")
    (out / "config.json").write_text(cfg.to_json())
    print(json.dumps(rows[-1]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# self-test

def selftest_checks(n: int = 32, corrupt_projection: bool = False) -> list[tuple[str, float, float]]:
    """(name, value, tolerance) for the fast invariant suite."""
    from .fields import random_bandlimited, taylor_green

    grid = TorusGrid(2, n)
    if corrupt_projection:
        def project(v):
            return 0.9 * leray_project(grid, v) + 0.1 * v
    else:
        def project(v):
            return leray_project(grid, v)

    rng = np.random.default_rng(7)
    v = random_bandlimited(grid, 11, kmax=5, divergence_free=False)
    Pv = project(v)
    phi = rng.standard_normal(grid.shape)
    checks = [
        ("projection idempotence", float(np.abs(project(Pv) - Pv).max()), 1e-10),
        ("projection annihilates gradients", float(np.abs(project(gradient(grid, phi))).max()), 1e-10),
        ("projected field is divergence-free", float(np.abs(divergence(grid, Pv)).max()), 1e-10),
    ]
    sigma = random_bandlimited(grid, 12, kmax=3)
    a, b = random_bandlimited(grid, 13, kmax=3), random_bandlimited(grid, 14, kmax=3)
    lhs = l2_inner(grid, lie_adjoint(grid, sigma, a), b)
    rhs = -l2_inner(grid, a, lie_derivative(grid, sigma, b))
    checks.append(("Lie adjoint identity", abs(lhs - rhs), 1e-9))

    disp = 0.1 * random_bandlimited(grid, 15, kmax=2, divergence_free=False)
    m = DiffeoMap(grid, disp)
    inv = invert_map(m)
    checks.append(("inversion m(A(x)) = x", float(np.abs(m(inv.positions) - grid.coords).max()), 1e-10))
    checks.append(("inversion A(m(x)) = x", float(np.abs(inv(m.positions) - grid.coords).max()), 1e-5))

    basis = NoiseBasis(grid, [NoiseMode("trig", (0, 1), 0.1)])
    u0 = taylor_green(grid)
    path = sample_brownian(1, 0.02, 10, 3)
    traj, _ = picard_solve(u0, basis, path)
    checks.append(("Weber residual (tiny case)", float(weber_residuals(traj, u0, basis, path).max()), 1e-6))
    return checks


def cmd_selftest(args) -> int:
    t0 = time.perf_counter()
    failures = []
    for name, value, tol in selftest_checks(corrupt_projection=args.corrupt_projection):
        ok = value <= tol
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (tol {tol:g})")
        if not ok:
            failures.append(name)
    print(f"selftest finished in {time.perf_counter() - t0:.1f} s")
    if failures:
        print("failed: " + ", ".join(failures), file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--threads", type=int, help="FFT worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stochlag", description="Lagrangian and direct solvers for Euler with transport noise.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run-lagrangian", parents=[common], help="Picard iteration on the Lagrangian map")
    sub.add_parser("run-direct", parents=[common], help="direct pseudo-spectral solve")
    p = sub.add_parser("compare", parents=[common], help="distances between two trajectory manifests")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--threshold", type=float, help="fail if sup relative L2 distance exceeds this")
    p = sub.add_parser("convergence", parents=[common], help="refinement study")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--target", choices=["solution", "flow"], default="solution")
    p.add_argument("--solver", choices=["direct", "lagrangian"], default="direct")
    sub.add_parser("flow-demo", parents=[common], help="noise flow maps and diagnostics")
    p = sub.add_parser("selftest", parents=[common], help="fast invariant suite")
    p.add_argument("--corrupt-projection", action="store_true", help=argparse.SUPPRESS)
    return parser


COMMANDS = {
    "run-lagrangian": cmd_run_lagrangian,
    "run-direct": cmd_run_direct,
    "compare": cmd_compare,
    "convergence": cmd_convergence,
    "flow-demo": cmd_flow_demo,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and args.config and args.command not in ("compare", "selftest"):
        with contextlib.suppress(Exception):
            threads = json.loads(Path(args.config).read_text()).get("threads")
    try:
        with scipy.fft.set_workers(threads or 1):
            return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Mismatch as e:
        print(f"comparison mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except PicardNonconvergence as e:
        print(f"Picard window shrink failed: {e}", file=sys.stderr)
        return EXIT_PICARD
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
