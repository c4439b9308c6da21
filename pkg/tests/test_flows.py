import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochlag.errors import InversionError, ResolutionError
from stochlag.fields import random_bandlimited
from stochlag.flows import (DiffeoMap, compose_maps, exact_noise_flow, heun_step, inverse_jacobian,
                            invert_map, jacobian, pull_back_velocity, solve_noise_flow)
from stochlag.noise import NoiseBasis, NoiseMode, constant_basis, refine, sample_brownian
from stochlag.spectral import TorusGrid, jacobian_of_field

SIN_SHEAR = NoiseMode("trig", (0, 1), 1.0, -np.pi / 2)  # sigma = (sin x2, 0)


def identity_error(grid, m):
    return float(np.abs(m.displacement).max())


class TestNoiseFlow:
    def test_constant_field_is_exact(self, grid32):
        b = constant_basis(grid32, (0.7, -0.2))
        p = sample_brownian(1, 1.0, 37, 4)
        m = solve_noise_flow(b, p, 1.0)
        W = p.values[0, -1]
        assert np.abs(m.displacement[0] - 0.7 * W).max() < 1e-13
        assert np.abs(m.displacement[1] + 0.2 * W).max() < 1e-13

    def test_zero_amplitude_is_identity(self, grid32):
        b = NoiseBasis(grid32, [NoiseMode("trig", (1, 1), 0.0)])
        m = solve_noise_flow(b, sample_brownian(1, 1.0, 10, 0), 0.5)
        assert identity_error(grid32, m) == 0

    def test_sine_shear_closed_form(self, grid32):
        b = NoiseBasis(grid32, [SIN_SHEAR])
        p = sample_brownian(1, 1.0, 100, 17)
        x, y = grid32.coords
        for t in (0.3, 1.0):
            m = solve_noise_flow(b, p, t)
            W = p.values[0, p.index_of(t)]
            assert np.abs(m.displacement[0] - np.sin(y) * W).max() < 1e-12
            assert np.abs(m.displacement[1]).max() < 1e-15

    def test_exact_noise_flow_helper(self, grid32):
        b = NoiseBasis(grid32, [SIN_SHEAR])
        p = sample_brownian(1, 0.5, 10, 1)
        assert np.abs(exact_noise_flow(b, p, 0.5).displacement - solve_noise_flow(b, p, 0.5).displacement).max() < 1e-13
        cell = NoiseBasis(grid32, [NoiseMode("cellular", (1,), 1.0)])
        assert exact_noise_flow(cell, p, 0.5) is None

    def test_pathwise_order_cellular(self):
        # non-commuting single-mode field: error against a refined-path reference shrinks at order >= 1
        grid = TorusGrid(2, 16)
        b = NoiseBasis(grid, [NoiseMode("cellular", (1,), 1.0)])
        errs = np.zeros(3)
        for seed in range(8):
            p = sample_brownian(1, 0.5, 16, seed)
            paths = [p, refine(p, 2), refine(refine(p, 2), 2)]
            ref = solve_noise_flow(b, refine(paths[-1], 8), 0.5).displacement
            for l, q in enumerate(paths):
                errs[l] += np.sqrt(np.mean((solve_noise_flow(b, q, 0.5).displacement - ref) ** 2))
        order = np.polyfit(np.log([1, 0.5, 0.25]), np.log(errs), 1)[0]
        assert order >= 1.0

    def test_flow_property(self, grid32):
        b = NoiseBasis(grid32, [NoiseMode("trig", (1, 1), 0.4), NoiseMode("trig", (1, -2), 0.3, 1.0)])
        p = sample_brownian(2, 0.4, 40, 3)
        phi_s = solve_noise_flow(b, p, 0.2)
        later = solve_noise_flow(b, p.window(20, 40), p.window(20, 40).T)
        direct = solve_noise_flow(b, p, 0.4)
        assert np.abs(compose_maps(later, phi_s).displacement - direct.displacement).max() < 1e-6

    def test_volume_preservation(self, grid32):
        b = NoiseBasis(grid32, [NoiseMode("trig", (1, 1), 0.5), NoiseMode("cellular", (1,), 0.5)])
        p = sample_brownian(2, 0.5, 50, 8)
        m = solve_noise_flow(b, p, 0.5)
        assert np.mean(np.abs(m.determinant - 1)) <= 5 * 0.01

    def test_heun_step_shapes(self, grid32):
        b = NoiseBasis(grid32, [SIN_SHEAR, NoiseMode("constant", vector=(0.0, 1.0))])
        out = heun_step(b, np.zeros((2, 5)), np.array([0.1, 0.2]))
        assert out.shape == (2, 5)
        assert np.allclose(out[1], 0.2)

    def test_path_basis_mismatch(self, grid32):
        with pytest.raises(ValueError):
            solve_noise_flow(NoiseBasis(grid32, [SIN_SHEAR]), sample_brownian(2, 1.0, 4, 0), 1.0)


class TestJacobians:
    def test_identity_and_translation(self, grid32):
        eye = np.eye(2)[:, :, None, None]
        for m in (DiffeoMap.identity(grid32), DiffeoMap.translation(grid32, (1.0, 2.5))):
            assert np.abs(jacobian(m) - eye).max() < 1e-14
            assert np.abs(inverse_jacobian(m) - eye).max() < 1e-14

    def test_singular_map_is_a_resolution_error(self, grid32):
        x, _ = grid32.coords
        disp = np.stack([-1.2 * np.sin(x), np.zeros_like(x)])
        with pytest.raises(ResolutionError):
            DiffeoMap(grid32, disp).inverse_jacobian

    def test_immutable(self, grid32):
        m = DiffeoMap.identity(grid32)
        with pytest.raises(ValueError):
            m.displacement[0, 0, 0] = 1.0

    def test_rejects_non_finite(self, grid32):
        from stochlag.errors import NumericalError
        bad = np.zeros((2, 32, 32))
        bad[0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            DiffeoMap(grid32, bad)


class TestInversion:
    def test_identity(self, grid32):
        assert identity_error(grid32, invert_map(DiffeoMap.identity(grid32))) == 0

    def test_translation(self, grid32):
        inv = invert_map(DiffeoMap.translation(grid32, (0.4, -1.1)))
        assert np.abs(inv.displacement[0] + 0.4).max() < 1e-12
        assert np.abs(inv.displacement[1] - 1.1).max() < 1e-12

    def test_shear_closed_form(self, grid64):
        b = NoiseBasis(grid64, [SIN_SHEAR])
        p = sample_brownian(1, 0.5, 50, 21)
        W = p.values[0, -1]
        inv = invert_map(solve_noise_flow(b, p, 0.5))
        _, y = grid64.coords
        assert np.abs(inv.displacement[0] + np.sin(y) * W).max() < 1e-10
        assert np.abs(inv.displacement[1]).max() < 1e-12

    @given(st.integers(0, 10_000))
    def test_self_consistency(self, seed):
        grid = TorusGrid(2, 32)
        m = DiffeoMap(grid, 0.15 * random_bandlimited(grid, seed, kmax=3, divergence_free=False))
        inv = invert_map(m)
        assert np.abs(compose_maps(m, inv).displacement).max() < 1e-9
        # the other order interpolates the inverse, whose displacement is not band-limited
        assert np.abs(compose_maps(inv, m).displacement).max() < 1e-3

    def test_newton_agrees_with_fixed_point(self, grid32):
        m = DiffeoMap(grid32, 0.3 * random_bandlimited(grid32, 4, kmax=2, divergence_free=False))
        a = invert_map(m)
        b = invert_map(m, method="newton")
        assert np.abs(a.displacement - b.displacement).max() < 1e-10

    def test_non_convergence_reports_residual(self, grid32):
        m = DiffeoMap(grid32, 0.3 * random_bandlimited(grid32, 4, kmax=2, divergence_free=False))
        with pytest.raises(InversionError) as err:
            invert_map(m, max_iter=2)
        assert err.value.residual > 0

    def test_backward_integration_cross_check(self, grid32):
        # the inverse of a Stratonovich flow is the flow of -sigma along the time-reversed path
        b = NoiseBasis(grid32, [NoiseMode("cellular", (1,), 0.8)])
        p = sample_brownian(1, 0.3, 600, 5)
        m = solve_noise_flow(b, p, 0.3)
        rev = p.values[:, -1:] - p.values[:, ::-1]
        back = NoiseBasis(grid32, [NoiseMode("cellular", (1,), -0.8)])
        from stochlag.noise import BrownianPath
        m_back = solve_noise_flow(back, BrownianPath(p.mesh, rev), 0.3)
        assert np.abs(invert_map(m).displacement - m_back.displacement).max() < 1e-4


class TestComposition:
    def test_with_identity(self, grid32):
        m = DiffeoMap(grid32, 0.1 * random_bandlimited(grid32, 1, kmax=3, divergence_free=False))
        e = DiffeoMap.identity(grid32)
        assert np.abs(compose_maps(e, m).displacement - m.displacement).max() < 1e-15
        assert np.abs(compose_maps(m, e).displacement - m.displacement).max() < 1e-13

    def test_translations_add(self, grid32):
        out = compose_maps(DiffeoMap.translation(grid32, (0.1, 0.2)), DiffeoMap.translation(grid32, (0.3, -0.5)))
        assert np.abs(out.displacement[0] - 0.4).max() < 1e-14
        assert np.abs(out.displacement[1] + 0.3).max() < 1e-14

    def test_chain_rule_jacobian(self, grid64):
        a = DiffeoMap(grid64, 0.1 * random_bandlimited(grid64, 1, kmax=3))
        b = DiffeoMap(grid64, 0.1 * random_bandlimited(grid64, 2, kmax=3))
        c = compose_maps(a, b)
        spectral = jacobian_of_field(grid64, c.displacement) + np.eye(2)[:, :, None, None]
        assert np.abs(c.jacobian - spectral).max() < 1e-6


class TestPullBack:
    def test_identity(self, grid32):
        u = random_bandlimited(grid32, 3)
        assert np.array_equal(pull_back_velocity(u, DiffeoMap.identity(grid32)), u)

    def test_translation(self, grid32):
        u = random_bandlimited(grid32, 3, kmax=3)
        c = np.array([0.3, -0.7])
        out = pull_back_velocity(u, DiffeoMap.translation(grid32, c), method="fourier")
        from stochlag.eulerian import shift_field
        assert np.abs(out - shift_field(grid32, u, -c)).max() < 1e-12

    def test_shear_closed_form(self, grid64):
        b = NoiseBasis(grid64, [SIN_SHEAR])
        p = sample_brownian(1, 0.5, 25, 2)
        W = p.values[0, -1]
        phi = solve_noise_flow(b, p, 0.5)
        x, y = grid64.coords
        u = np.stack([np.zeros_like(x), np.cos(x)])
        ut = pull_back_velocity(u, phi)
        arg = x + np.sin(y) * W
        assert np.abs(ut[0] + W * np.cos(y) * np.cos(arg)).max() < 1e-7
        assert np.abs(ut[1] - np.cos(arg)).max() < 1e-7
