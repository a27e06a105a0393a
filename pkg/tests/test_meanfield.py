import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanfield_lab.density import DensityField
from meanfield_lab.kernels import PotentialSpec, eval_force, eval_potential
from meanfield_lab.meanfield import (blow_up_monitor, convolve_force, convolve_potential,
                                     free_energy, solve_pde, step_pde)

HEAT = PotentialSpec(2)
PKS = PotentialSpec.pks(2, 0.5, spectral_band=16)


def smooth_random_field(rng, n, d, band, amp=0.3):
    hat = np.zeros((n,) * d, dtype=complex)
    ks = np.meshgrid(*([np.fft.fftfreq(n, 1 / n)] * d), indexing="ij")
    mask = (np.max(np.abs(np.stack(ks)), axis=0) <= band) & (sum(k * k for k in ks) > 0)
    hat[mask] = rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())
    v = np.fft.ifftn(hat).real
    v = 1.0 + amp * v / np.abs(v).max()
    return DensityField.from_values(v)


def cos_mode(n, eps):
    g = np.arange(n) / n
    x, _ = np.meshgrid(g, g, indexing="ij")
    return DensityField(1.0 + eps * np.cos(2 * np.pi * x))


class TestStep:
    def test_heat_multiplier_single_mode(self):
        sigma, dt, eps = 0.5, 1e-3, 1e-8
        out = step_pde(cos_mode(32, eps), PotentialSpec.pks(2, 0.0, spectral_band=16), sigma, dt)
        amp = 2 * out.fourier()[1, 0].real
        assert abs(amp - eps / (1 + 4 * np.pi**2 * sigma * dt)) < 1e-12

    @pytest.mark.parametrize("spec", [HEAT, PKS, PotentialSpec.riesz(2, 0.5, spectral_band=16),
                                      PotentialSpec(2, smooth_modes=[((1, 2), 0.3)],
                                                    spectral_band=8)])
    def test_uniform_is_fixed(self, spec):
        rho = DensityField.uniform(32, 2)
        out = step_pde(rho, spec, 0.3, 1e-2)
        assert np.abs(out.values - 1.0).max() < 1e-13

    def test_mass_conservation_1000_steps(self):
        rho = DensityField.wrapped_gaussian(32, 2, 0.15)
        for _ in range(1000):
            rho = step_pde(rho, PKS, 0.5, 1e-3)
        assert abs(rho.mass() - 1.0) < 1e-12
        assert rho.values.min() >= 0.0

    def test_heat_amplitudes_decay_exactly(self, rng):
        rho = smooth_random_field(rng, 32, 2, 6)
        sigma, dt = 0.2, 2e-3
        out = step_pde(rho, HEAT, sigma, dt)
        ks = np.meshgrid(*([np.fft.fftfreq(32, 1 / 32)] * 2), indexing="ij")
        mult = 1 / (1 + 4 * np.pi**2 * sigma * dt * (ks[0] ** 2 + ks[1] ** 2))
        assert np.abs(out.fourier() - rho.fourier() * mult).max() < 1e-12

    def test_symmetry_preserved(self):
        rho = DensityField.wrapped_gaussian(32, 2, 0.12, center=(0.0, 0.3))
        for _ in range(20):
            rho = step_pde(rho, PKS, 0.3, 2e-3)
        v = rho.values
        mirrored = v[(-np.arange(32)) % 32, :]
        assert np.abs(v - mirrored).max() < 1e-12

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            step_pde(DensityField.uniform(16, 2), PKS, 0.3, 0.0)


class TestConvolution:
    @given(st.integers(0, 2**32 - 1))
    def test_spectral_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        spec = PotentialSpec(2, attractive_log_coefficient=1.0, riesz_exponent=0.7,
                             riesz_coefficient=0.5, spectral_band=7)
        rho = smooth_random_field(rng, 16, 2, 7)
        pts = rho.grid_points()
        disp = (pts[:, None, :] - pts[None, :, :]).reshape(-1, 2)
        K = eval_force(spec, disp, delta=0.0).reshape(256, 256, 2)
        V = eval_potential(spec, disp).reshape(256, 256)
        w = rho.values.ravel() / 256
        want_K = np.einsum("ijc,j->ci", K, w).reshape(2, 16, 16)
        want_V = (V @ w).reshape(16, 16)
        assert np.abs(convolve_force(rho, spec) - want_K).max() < 1e-10
        assert np.abs(convolve_potential(rho, spec) - want_V).max() < 1e-10


class TestFreeEnergy:
    def test_uniform_zero_mean(self):
        assert free_energy(DensityField.uniform(16, 2), PotentialSpec.riesz(2, 0.5,
                                                                            spectral_band=8),
                           0.7) == 0.0

    def test_uniform_pks(self):
        lam = 0.8
        rho = DensityField.uniform(16, 2)
        val = free_energy(rho, PotentialSpec.pks(2, lam, spectral_band=8), 1.0)
        # quadrature of 1/2 int int V over the grid
        spec = PotentialSpec.pks(2, lam, spectral_band=7)
        pts = rho.grid_points()
        quad = 0.5 * eval_potential(spec, pts).mean()
        assert val == pytest.approx(-np.pi * lam, rel=1e-12)
        assert quad == pytest.approx(-np.pi * lam, rel=1e-10)

    def test_monotone_subcritical(self):
        rho = DensityField.wrapped_gaussian(32, 2, 0.12)
        sigma = 0.5
        energies = [free_energy(rho, PKS, sigma)]
        for _ in range(100):
            rho = step_pde(rho, PKS, sigma, 1e-3)
            energies.append(free_energy(rho, PKS, sigma))
        e = np.array(energies)
        assert np.all(np.diff(e) <= 1e-8 * np.abs(e[:-1]))


class TestBlowUp:
    def test_pure_diffusion_never_flags(self):
        sol = solve_pde(DensityField.wrapped_gaussian(32, 2, 0.05), HEAT, 0.25, 1e-2, 0.5)
        assert not sol.blowup.flagged and not sol.halted

    def test_growth_flag(self):
        base = DensityField.wrapped_gaussian(32, 2, 0.2)
        spike = np.full((32, 32), 1e-6)
        spike[0, 0] = 1.0
        peaked = DensityField.from_values(spike, time=0.5)
        rep = blow_up_monitor([base, peaked], lam=1.5, sigma=0.25)
        assert rep.flagged and rep.flag_time == 0.5
        assert rep.reason in ("max_density", "top_octave")
        assert rep.supercritical

    def test_top_octave_flag(self):
        g = np.arange(32) / 32
        x, _ = np.meshgrid(g, g, indexing="ij")
        rough = DensityField(1.0 + 0.5 * np.cos(2 * np.pi * 12 * x), 0.1)
        rep = blow_up_monitor([DensityField.uniform(32, 2), rough])
        assert rep.reason == "top_octave" and rep.flag_time == 0.1

    def test_resolution_loss_flag(self):
        rho = DensityField.uniform(16, 2)
        small = rho.with_values(rho.values, time=0.2, clipped_mass=1e-7)
        later = rho.with_values(rho.values, time=0.3, clipped_mass=1e-4)
        rep = blow_up_monitor([rho, small, later])
        assert rep.reason == "resolution_loss" and rep.flag_time == 0.3
        summary = rep.to_dict()
        assert summary["steps_over_clip_tolerance"] == 2 and summary["max_step_clip"] == 1e-4

    def test_dichotomy_at_threshold(self):
        rho0 = DensityField.wrapped_gaussian(64, 2, 0.06)
        flags = {}
        for lam in (0.8, 1.3):
            spec = PotentialSpec(2, attractive_log_coefficient=lam, spectral_band=31)
            flags[lam] = solve_pde(rho0, spec, 0.25, 1e-3, 0.2).blowup.flagged
        assert flags == {0.8: False, 1.3: True}

    def test_solve_pde_saves_requested_times(self):
        sol = solve_pde(DensityField.wrapped_gaussian(16, 2, 0.2), PKS, 0.5, 1e-2, 0.1,
                        save_times=[0.0, 0.05, 0.1])
        np.testing.assert_allclose(sol.times, [0.0, 0.05, 0.1])
        assert len(sol.free_energy) == 3
        with pytest.raises(ValueError):
            solve_pde(DensityField.uniform(16, 2), PKS, 0.5, 0.03, 0.1)
