import itertools

import numpy as np
import pytest

from spi import grid
from spi.config import PhasingConfig
from spi.phasing import (CONSTRAINED, FREE, IntensityConstraint, PhaseIterate, Projector, _top_n_mask,
                         align_solutions, align_to, average_solutions, calc_intensity, center_density,
                         data_radius, default_outer_mask, dm_iteration, er_iteration, invert,
                         project_modulus, project_support, radial_projection, random_iterate,
                         reconstruct, remove_global_phase, run_phasing, shift_volume)
from spi.simulate import PhantomParams, make_phantom, particle_intensity


def _random_iterate(shape, g):
    return PhaseIterate(g.standard_normal(shape) + 1j * g.standard_normal(shape), g.standard_normal(shape))


@pytest.fixture(scope="module")
def small_problem():
    ph = make_phantom(PhantomParams(outer_radius=3.0, shell_thickness=(0.75, 0.75), gap=0.5), 17)
    I = particle_intensity(ph.density.values)
    return ph, I


def test_constraint_masks(small_problem):
    _, I = small_problem
    c = IntensityConstraint.build(I, inner=2, outer=6)
    r = grid.radius(I.shape)
    assert np.all(c.mask[(r >= 2) & (r < 6)] == CONSTRAINED)
    assert np.all(c.mask[(r < 2) | (r >= 6)] == FREE)
    assert data_radius(I) == pytest.approx(r.max())
    assert default_outer_mask(I) == np.floor(57 / 64 * r.max())
    with pytest.raises(ValueError):
        IntensityConstraint.build(-np.ones((5, 5, 5)), inner=0, outer=10)


def test_modulus_projection_matches_measurement(small_problem):
    _, I = small_problem
    c = IntensityConstraint.build(I, inner=2, outer=7)
    g = np.random.default_rng(0)
    psi = _random_iterate(I.shape, g)
    out = project_modulus(psi, c)
    m = c.constrained
    np.testing.assert_allclose(calc_intensity(out)[m], I[m], rtol=1e-10, atol=1e-9)
    # free voxels untouched
    np.testing.assert_allclose(grid.fft3(out.rho)[~m], grid.fft3(psi.rho)[~m], atol=1e-9)
    np.testing.assert_array_equal(out.B[~m], psi.B[~m])


def test_modulus_projection_is_nearest_point(small_problem):
    # in the (Re F, Im F, B) metric no other point with the right modulus is closer
    _, I = small_problem
    c = IntensityConstraint.build(I, inner=2, outer=7)
    g = np.random.default_rng(1)
    psi = _random_iterate(I.shape, g)
    p = project_modulus(psi, c)
    d0 = (psi - p).norm()
    for _ in range(5):
        F = grid.fft3(p.rho)
        B = p.B.copy()
        m = c.constrained
        theta = g.uniform(-0.3, 0.3, m.sum())
        amp = np.sqrt(np.abs(F[m]) ** 2 + B[m] ** 2)
        ang = np.arctan2(B[m], np.abs(F[m])) + theta
        F[m] = np.exp(1j * np.angle(F[m])) * amp * np.cos(ang)
        B[m] = amp * np.sin(ang)
        other = PhaseIterate(grid.ifft3(F), B)
        assert (psi - other).norm() >= d0 - 1e-9


def test_zero_amplitude_goes_to_background():
    I = np.ones((5, 5, 5))
    c = IntensityConstraint.build(I, inner=0, outer=10)
    zero = PhaseIterate(np.zeros((5, 5, 5)), np.zeros((5, 5, 5)))
    out = project_modulus(zero, c, background=True)
    np.testing.assert_allclose(out.B, 1.0)
    out = project_modulus(zero, c, background=False)
    np.testing.assert_allclose(np.abs(grid.fft3(out.rho)), 1.0)
    np.testing.assert_array_equal(out.B, 0.0)


def test_top_n_ties_prefer_low_index():
    rho = np.array([1.0, 3.0, 2.0, 2.0, 2.0, 0.5]).reshape(1, 2, 3)
    keep = _top_n_mask(rho, 3).ravel()
    np.testing.assert_array_equal(keep, [False, True, True, True, False, False])
    assert _top_n_mask(rho, 6).all()


def test_support_projection(small_problem):
    _, I = small_problem
    g = np.random.default_rng(2)
    psi = _random_iterate(I.shape, g)
    out = project_support(psi, 50)
    assert np.count_nonzero(out.rho) == 50
    kept = np.abs(psi.rho[out.rho != 0]).min()
    assert np.all(np.abs(psi.rho[out.rho == 0]) <= kept)
    prof = grid.radial_mean(out.B)
    np.testing.assert_allclose(out.B, prof[grid.shell_index(I.shape)])
    assert np.all(out.B >= 0)
    off = project_support(psi, 50, background=False)
    np.testing.assert_array_equal(off.B, 0)
    with pytest.raises(ValueError):
        project_support(psi, 0)


def test_radial_projection_is_nearest_symmetric_nonnegative():
    g = np.random.default_rng(3)
    B = g.standard_normal((9, 9, 9)) + 0.3
    P = radial_projection(B)
    d0 = np.sum((B - P) ** 2)
    shells = grid.shell_index(B.shape)
    for _ in range(20):
        prof = np.maximum(grid.radial_mean(P, shells) + 0.05 * g.standard_normal(shells.max() + 1), 0)
        assert np.sum((B - prof[shells]) ** 2) >= d0 - 1e-12


def test_er_decreases_error(small_problem):
    ph, I = small_problem
    c = IntensityConstraint.build(I, inner=0, outer=9)
    proj = Projector(c, int(ph.support.sum()), background=False)
    psi = random_iterate(c, np.random.default_rng(4), background=False)
    errs = []
    for _ in range(30):
        psi, e = er_iteration(psi, proj)
        errs.append(e)
    # error reduction never increases the distance between the sets
    assert np.all(np.diff(errs) <= 1e-9 * errs[0])


def test_dm_fixed_point_solves_problem(small_problem):
    # at a fixed point x*, P_M(f_S(x*)) = P_S(f_M(x*)) and that point lies in both sets
    ph, I = small_problem
    c = IntensityConstraint.build(I, inner=0, outer=9)
    proj = Projector(c, int(ph.support.sum()), background=False)
    truth = PhaseIterate(ph.density.values, np.zeros(I.shape))
    new, err = dm_iteration(truth, proj, 0.7)
    assert err < 1e-9 * truth.norm()
    assert (new - truth).norm() < 1e-9 * truth.norm()


def test_random_iterate_ranges(small_problem):
    _, I = small_problem
    c = IntensityConstraint.build(I, inner=2, outer=7)
    it = random_iterate(c, np.random.default_rng(0), True, 2.0)
    top = 2.0 * np.sqrt(I[c.constrained]).mean()
    assert it.B.min() >= 0 and it.B.max() <= top
    assert np.all(it.rho.imag == 0) and it.rho.real.min() >= 0 and it.rho.real.max() <= 1


def test_run_phasing_reproducible(small_problem):
    ph, I = small_problem
    cfg = PhasingConfig(repeats=3, iters="5ERA 10DM 5ERA", voxel_number=int(ph.support.sum()), inner_mask=1,
                        outer_mask=8, seed=5)
    a = run_phasing(I, cfg)
    b = run_phasing(I, cfg, workers=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.final.rho, y.final.rho)
        assert x.errors.shape == (20,)
    assert not np.array_equal(a[0].final.rho, a[1].final.rho)


def test_noiseless_reconstruction(small_problem):
    ph, I = small_problem
    cfg = PhasingConfig(repeats=2, iters="100ERA 500DM 100ERA", voxel_number=int(ph.support.sum()),
                        inner_mask=0, background=False, seed=1)
    avg, runs = reconstruct(I, cfg)
    rec = align_to(ph.density.values, avg.density)
    ref = ph.density.values
    err = np.linalg.norm(rec - ref) / np.linalg.norm(ref)
    assert err < 0.05
    assert max(r.errors[-1] for r in runs) < 1e-2


def _blob(g, M=15):
    rho = np.zeros((M, M, M), dtype=complex)
    s = slice(M // 2 - 3, M // 2 + 3)
    rho[s, s, s] = g.random((6, 6, 6)) + 0.2j * g.random((6, 6, 6))
    return rho


def test_shift_volume_roundtrip():
    g = np.random.default_rng(6)
    rho = _blob(g)
    back = shift_volume(shift_volume(rho, (1.3, -2.6, 0.25)), (-1.3, 2.6, -0.25))
    np.testing.assert_allclose(back, rho, atol=1e-12)
    np.testing.assert_allclose(shift_volume(rho, (2, 0, -1)), np.roll(rho, (2, 0, -1), axis=(0, 1, 2)),
                               atol=1e-12)


def test_align_removes_shift_phase_and_twin():
    g = np.random.default_rng(7)
    rho = _blob(g)
    copies = [rho,
              np.roll(rho, (3, -2, 1), axis=(0, 1, 2)),
              np.exp(1.1j) * rho,
              invert(rho),
              np.exp(-2.0j) * invert(np.roll(rho, (-1, 2, 2), axis=(0, 1, 2)))]
    aligned = align_solutions(copies)
    for a in aligned[1:]:
        assert np.linalg.norm(a - aligned[0]) < 1e-9
    # invert is an involution
    np.testing.assert_allclose(invert(invert(rho)), rho)
    assert abs(np.angle(remove_global_phase(rho).sum())) < 1e-12


def test_align_to_reference():
    g = np.random.default_rng(8)
    rho = center_density(_blob(g))
    moved = np.exp(0.4j) * invert(np.roll(rho, (2, 1, -3), axis=(0, 1, 2)))
    np.testing.assert_allclose(align_to(rho, moved), rho, atol=1e-9)


def test_average_and_background_profile():
    g = np.random.default_rng(9)
    rho = _blob(g)
    B = radial_projection(np.abs(g.standard_normal(rho.shape)))
    avg = average_solutions([rho, rho], [B, B])
    np.testing.assert_allclose(avg.density, rho)
    shells, prof = avg.background_profile()
    np.testing.assert_allclose(prof, grid.radial_mean(B)[shells])
