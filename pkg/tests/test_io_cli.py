import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochlag import io
from stochlag.cli import fit_order, main
from stochlag.config import ConfigError, ExperimentConfig, load
from stochlag.eulerian import random_shift_oracle
from stochlag.fields import taylor_green
from stochlag.flows import DiffeoMap
from stochlag.lagrangian import VelocityTrajectory
from stochlag.noise import BrownianPath, constant_basis
from stochlag.spectral import TorusGrid, l2_norm

SMALL = {"n": 32, "T": 0.05, "dt": 1e-3}


def write_config(tmp_path, name="cfg.json", **over):
    cfg = {**SMALL, **over}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, command, out="out", name="cfg.json", **over):
    code = main([command, "--config", write_config(tmp_path, name, **over), "--out", str(tmp_path / out)])
    return code, tmp_path / out


# ---------------------------------------------------------------------------
# raw fields and manifests

class TestRawFormat:
    @given(st.sampled_from([2, 3]), st.sampled_from([8, 16]), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_round_trip(self, tmp_path_factory, d, n, ncomp, seed):
        f = np.random.default_rng(seed).standard_normal((ncomp,) + (n,) * d)
        path = tmp_path_factory.mktemp("raw") / "f.raw"
        io.write_field(path, f)
        g = io.read_field(path)
        assert g.shape == f.shape and np.array_equal(f, g)

    def test_header_and_byte_order(self, tmp_path):
        f = np.arange(2 * 8 * 8, dtype=float).reshape(2, 8, 8)
        io.write_field(tmp_path / "f.raw", f)
        raw = (tmp_path / "f.raw").read_bytes()
        assert struct.unpack("<4I", raw[:16]) == (io.MAGIC, 2, 8, 2)
        body = np.frombuffer(raw[16:], dtype="<f8")
        # first index varies fastest within a component
        assert body[0] == f[0, 0, 0] and body[1] == f[0, 1, 0] and body[8] == f[0, 0, 1]
        assert body[64] == f[1, 0, 0]

    def test_scalar_field_gets_one_component(self, tmp_path):
        io.write_field(tmp_path / "s.raw", np.ones((8, 8)))
        assert io.read_field(tmp_path / "s.raw").shape == (1, 8, 8)

    def test_bad_magic(self, tmp_path):
        io.write_field(tmp_path / "f.raw", np.zeros((2, 8, 8)))
        raw = bytearray((tmp_path / "f.raw").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "f.raw").write_bytes(bytes(raw))
        with pytest.raises(io.FormatError):
            io.read_field(tmp_path / "f.raw")

    def test_truncated(self, tmp_path):
        io.write_field(tmp_path / "f.raw", np.zeros((2, 8, 8)))
        (tmp_path / "f.raw").write_bytes((tmp_path / "f.raw").read_bytes()[:-8])
        with pytest.raises(io.FormatError):
            io.read_field(tmp_path / "f.raw")

    def test_not_a_grid_field(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_field(tmp_path / "f.raw", np.zeros((3, 5)))

    def test_map_round_trip(self, tmp_path, grid32):
        m = DiffeoMap.translation(grid32, (0.1, -0.2))
        io.write_map(tmp_path / "m.raw", m)
        assert np.array_equal(io.read_map(tmp_path / "m.raw").displacement, m.displacement)


class TestManifest:
    def test_round_trip(self, tmp_path, grid32):
        u0 = taylor_green(grid32)
        traj = VelocityTrajectory(grid32, [0.0, 0.1], np.stack([u0, 2 * u0]), 3.0)
        io.write_trajectory(tmp_path, traj, seed=5, config_hash="abc", kind="direct")
        man = io.read_manifest(tmp_path)
        assert man["seed"] == 5 and man["config_hash"] == "abc" and man["grid"] == {"d": 2, "n": 32}
        back = io.load_trajectory(man)
        assert np.array_equal(back.values, traj.values) and np.array_equal(back.times, traj.times)

    @pytest.mark.parametrize("key", ["seed", "config_hash"])
    def test_missing_provenance_rejected(self, tmp_path, grid32, key):
        traj = VelocityTrajectory(grid32, [0.0], taylor_green(grid32)[None], 3.0)
        path = io.write_trajectory(tmp_path, traj, seed=1, config_hash="h", kind="direct")
        man = json.loads(path.read_text())
        del man[key]
        path.write_text(json.dumps(man))
        with pytest.raises(io.FormatError):
            io.read_manifest(tmp_path)

    def test_rows_round_trip(self, tmp_path):
        rows = [{"time": 0.1, "energy": 1 / 3, "picard_iterations": 4, "weber_residual": ""}]
        io.write_rows(tmp_path / "d.csv", rows)
        back = io.read_rows(tmp_path / "d.csv")[0]
        assert back["energy"] == 1 / 3 and back["picard_iterations"] == 4 and back["weber_residual"] is None


# ---------------------------------------------------------------------------
# configuration

class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig({})
        assert cfg["n"] == 64 and cfg.steps == 250 and cfg.grid == TorusGrid(2, 64)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="picard"):
            ExperimentConfig({"picard": {"tolerance": 1e-8}})

    def test_bad_json_reports_position(self, tmp_path):
        (tmp_path / "c.json").write_text('{"n": 32,\n "T": }')
        with pytest.raises(ConfigError, match="line 2"):
            load(tmp_path / "c.json")

    @pytest.mark.parametrize("raw", [
        {"T": 0.1, "picard": {"T_min": 0.2}},
        {"T": 0.1005, "dt": 1e-3},
        {"noise": [{"kind": "trig", "wavevector": [1, 0, 0]}]},
        {"noise": [{"kind": "constant"}]},
        {"n": 16, "initial": {"kind": "random-bandlimited", "kmax": 6}},
    ])
    def test_semantic_errors(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig(raw)

    def test_hash_stable_and_semantic(self):
        a = ExperimentConfig({"n": 32, "out": "x", "threads": 4})
        b = ExperimentConfig({"threads": 1, "n": 32, "out": "y"})
        assert a.hash == b.hash and len(a.hash) == 64
        assert a.hash != ExperimentConfig({"n": 32, "seed": 1}).hash
        # explicit defaults hash the same as omitted ones
        assert ExperimentConfig({"n": 32, "s": 3.0}).hash == a.hash

    def test_overrides(self, tmp_path):
        cfg = load(write_config(tmp_path), {"seed": 9, "out": None})
        assert cfg["seed"] == 9 and cfg["out"] == "out"

    def test_zero_horizon_path(self):
        cfg = ExperimentConfig({"T": 0.0})
        assert cfg.steps == 0 and cfg.path().N == 1


# ---------------------------------------------------------------------------
# subcommands

def diag(out):
    return io.read_rows(out / "diagnostics.csv")


class TestRunLagrangian:
    def test_taylor_green_zero_noise(self, tmp_path):
        code, out = run(tmp_path, "run-lagrangian")
        assert code == 0
        E = np.array([r["energy"] for r in diag(out)])
        assert np.abs(E / E[0] - 1).max() < 1e-8
        assert len(E) == 51
        for name in ("iterations.json", "summary.json", "config.json", "trajectory/manifest.json"):
            assert (out / name).exists()
        man = io.read_manifest(out / "trajectory")
        assert man["config_hash"] == ExperimentConfig({**SMALL}).hash

    def test_zero_datum_one_iteration(self, tmp_path):
        code, out = run(tmp_path, "run-lagrangian", initial={"kind": "zero"},
                        noise=[{"kind": "trig", "wavevector": [1, 1], "amplitude": 0.3}])
        assert code == 0
        report = json.loads((out / "iterations.json").read_text())
        assert report["iterations"] == 1
        assert all(r["picard_iterations"] == 1 for r in diag(out))

    def test_T_min_above_horizon(self, tmp_path, capsys):
        code, _ = run(tmp_path, "run-lagrangian", picard={"T_min": 0.1})
        assert code == 2
        assert "T_min" in capsys.readouterr().err

    def test_unknown_key_exit_code(self, tmp_path):
        assert run(tmp_path, "run-lagrangian", bogus=1)[0] == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["run-direct", "--config", str(tmp_path / "none.json")]) == 2

    def test_realizations_and_stride(self, tmp_path):
        code, out = run(tmp_path, "run-direct", realizations=2, output_stride=20, seed=3,
                        noise=[{"kind": "constant", "vector": [1.0, 0.0]}])
        assert code == 0
        seeds = [io.read_manifest(out / f"realization_{r:03d}" / "trajectory")["seed"] for r in range(2)]
        assert seeds == [3, 4]
        times = io.read_manifest(out / "realization_000" / "trajectory")["times"]
        assert np.allclose(times, [0.0, 0.02, 0.04, 0.05])


class TestRunDirect:
    def test_energy_drift_reported(self, tmp_path):
        code, out = run(tmp_path, "run-direct", initial={"kind": "random-bandlimited", "kmax": 4, "seed": 2})
        assert code == 0
        assert json.loads((out / "summary.json").read_text())["energy_drift"] <= 1e-8

    def test_constant_noise_matches_shift_oracle(self, tmp_path):
        code, out = run(tmp_path, "run-direct", noise=[{"kind": "constant", "vector": [1.0, 0.0]}], seed=4)
        assert code == 0
        traj = io.load_trajectory(out / "trajectory")
        path = BrownianPath.from_csv(out / "path.csv")
        oracle = random_shift_oracle(traj.values[0], constant_basis(traj.grid, (1.0, 0.0)), path)
        rel = max(l2_norm(traj.grid, a - b) / l2_norm(traj.grid, b) for a, b in zip(traj.values, oracle.values))
        # Heun's per-step phase error |k dW|^3 / 6 accumulates to ~1e-4 here
        assert rel < 1e-3

    def test_zero_steps(self, tmp_path):
        code, out = run(tmp_path, "run-direct", T=0.0)
        assert code == 0
        traj = io.load_trajectory(out / "trajectory")
        assert len(traj) == 1
        assert np.abs(traj.values[0] - taylor_green(traj.grid)).max() < 1e-15


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cmp")
    noise = [{"kind": "trig", "wavevector": [0, 1], "amplitude": 0.1}]
    assert run(tmp, "run-direct", "direct", noise=noise, seed=1)[0] == 0
    assert run(tmp, "run-lagrangian", "lag", noise=noise, seed=1)[0] == 0
    assert run(tmp, "run-direct", "coarse", n=16, seed=1)[0] == 0
    assert run(tmp, "run-direct", "other_seed", noise=noise, seed=2)[0] == 0
    return tmp


class TestCompare:
    def test_self_is_zero(self, runs, tmp_path):
        a = str(runs / "direct" / "trajectory")
        assert main(["compare", a, a, "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "compare.json").read_text())
        assert report["sup_l2"] == 0 and report["sup_hs_minus_1"] == 0 and report["sup_sup"] == 0
        assert len(io.read_rows(tmp_path / "compare.csv")) == 51

    def test_lagrangian_versus_direct(self, runs, capsys):
        code = main(["compare", str(runs / "lag" / "trajectory"), str(runs / "direct" / "trajectory"),
                     "--threshold", "5e-3"])
        assert code == 0
        assert capsys.readouterr().out.splitlines()[-1].startswith("PASS")

    def test_threshold_failure(self, runs):
        a, b = str(runs / "lag" / "trajectory"), str(runs / "direct" / "trajectory")
        assert main(["compare", a, b, "--threshold", "1e-15"]) == 3

    def test_mismatched_grid(self, runs):
        assert main(["compare", str(runs / "direct" / "trajectory"), str(runs / "coarse" / "trajectory")]) == 3

    def test_mismatched_seed(self, runs):
        assert main(["compare", str(runs / "direct" / "trajectory"), str(runs / "other_seed" / "trajectory")]) == 3

    def test_missing_manifest(self, runs, tmp_path):
        assert main(["compare", str(runs / "direct" / "trajectory"), str(tmp_path)]) == 3


class TestConvergence:
    def test_single_level_is_usage_error(self, tmp_path):
        code = main(["convergence", "--config", write_config(tmp_path), "--levels", "1", "--out", str(tmp_path)])
        assert code == 2

    def test_shear_flow_closed_form(self, tmp_path):
        noise = [{"kind": "trig", "wavevector": [0, 1], "amplitude": 1.0, "phase": -np.pi / 2}]
        cfg = write_config(tmp_path, noise=noise, T=0.5, dt=0.05)
        assert main(["convergence", "--config", cfg, "--target", "flow", "--out", str(tmp_path / "o")]) == 0
        summary = json.loads((tmp_path / "o" / "convergence.json").read_text())
        assert summary["reference"] == "closed-form"
        # Heun is exact for a shear, so every level sits at round-off
        errs = [r["error"] for r in io.read_rows(tmp_path / "o" / "convergence.csv")]
        assert len(errs) == 3 and max(errs) < 1e-12

    def test_cellular_flow_order(self, tmp_path):
        noise = [{"kind": "cellular", "wavevector": [1, 1], "amplitude": 1.0}]
        cfg = write_config(tmp_path, n=16, noise=noise, T=0.5, dt=0.03125, seed=3)
        assert main(["convergence", "--config", cfg, "--target", "flow", "--levels", "4",
                     "--out", str(tmp_path / "o")]) == 0
        summary = json.loads((tmp_path / "o" / "convergence.json").read_text())
        assert summary["reference"] == "finest-level" and summary["order_dt"] >= 1.0

    def test_deterministic_second_order(self, tmp_path):
        init = {"kind": "random-bandlimited", "kmax": 3, "seed": 2}
        cfg = write_config(tmp_path, initial=init, T=0.4, dt=0.04)
        assert main(["convergence", "--config", cfg, "--levels", "4", "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "convergence.json").read_text())["order_dt"] >= 2.0 - 0.1

    def test_taylor_green_has_no_temporal_error(self, tmp_path):
        cfg = write_config(tmp_path, T=0.2, dt=0.02)
        assert main(["convergence", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        errs = [r["error"] for r in io.read_rows(tmp_path / "o" / "convergence.csv") if r["axis"] == "dt"]
        assert max(errs) < 1e-12

    def test_fit_order(self):
        h = np.array([0.1, 0.05, 0.025])
        assert fit_order(h, 3 * h ** 2) == pytest.approx(2.0)
        assert np.isnan(fit_order(h, [1e-15, 1e-16, 0.0]))


class TestFlowDemo:
    def test_shear_maps(self, tmp_path):
        noise = [{"kind": "trig", "wavevector": [0, 1], "amplitude": 1.0, "phase": -np.pi / 2}]
        code, out = run(tmp_path, "flow-demo", noise=noise, output_stride=10)
        assert code == 0
        rows = io.read_rows(out / "flow.csv")
        assert len(rows) == 6
        assert max(r["closed_form_error"] for r in rows) < 1e-12
        assert max(abs(r["det_min"] - 1) for r in rows) < 1e-10
        man = json.loads((out / "maps" / "manifest.json").read_text())
        assert len(man["files"]) == 6
        assert io.read_map(out / "maps" / man["files"][-1]).grid.n == 32

    def test_needs_noise(self, tmp_path):
        assert run(tmp_path, "flow-demo")[0] == 2


class TestSelftest:
    def test_passes(self, capsys):
        assert main(["selftest"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_corrupted_projection(self, capsys):
        assert main(["selftest", "--corrupt-projection"]) != 0
        assert "projection" in capsys.readouterr().err


class TestDeterminism:
    NOISE = [{"kind": "trig", "wavevector": [1, 1], "amplitude": 0.2}]

    def outputs(self, out):
        names = ["diagnostics.csv", "summary.json", "iterations.json", "trajectory/manifest.json", "path.csv"]
        return {n: (out / n).read_bytes() for n in names}

    def test_bit_identical_reruns(self, tmp_path):
        a = run(tmp_path, "run-lagrangian", "a", noise=self.NOISE, seed=8)
        b = run(tmp_path, "run-lagrangian", "b", noise=self.NOISE, seed=8)
        assert a[0] == b[0] == 0
        assert self.outputs(a[1]) == self.outputs(b[1])
        raws = sorted((a[1] / "trajectory").glob("*.raw"))
        assert all(f.read_bytes() == (b[1] / "trajectory" / f.name).read_bytes() for f in raws)

    def test_thread_count(self, tmp_path):
        cfg = write_config(tmp_path, noise=self.NOISE, seed=8)
        assert main(["run-direct", "--config", cfg, "--out", str(tmp_path / "t1"), "--threads", "1"]) == 0
        assert main(["run-direct", "--config", cfg, "--out", str(tmp_path / "t2"), "--threads", "2"]) == 0
        u1 = io.load_trajectory(tmp_path / "t1" / "trajectory").values
        u2 = io.load_trajectory(tmp_path / "t2" / "trajectory").values
        assert np.abs(u1 - u2).max() <= 1e-12
        h1 = io.read_manifest(tmp_path / "t1" / "trajectory")["config_hash"]
        assert h1 == io.read_manifest(tmp_path / "t2" / "trajectory")["config_hash"]
