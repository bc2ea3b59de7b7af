import numpy as np
import pytest
from scipy import stats
from scipy.spatial import ConvexHull

from spi import grid
from spi.simulate import (FluenceDistribution, PhantomParams, expected_counts, fluence_for_photons,
                          icosahedron_face_normals, icosahedron_vertices, icosahedron_volume,
                          make_phantom, make_truth, orientation_averaged_photons, simulate_dataset,
                          simulate_frame)


def test_icosahedron():
    v = icosahedron_vertices()
    assert v.shape == (12, 3)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)
    assert icosahedron_volume(2.0) == pytest.approx(ConvexHull(2.0 * v).volume, rel=1e-12)
    n = icosahedron_face_normals()
    assert n.shape == (20, 3)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)


def test_reference_phantom():
    ph = make_phantom(PhantomParams(), 65)
    rho = ph.density.values
    # support count of the reference phantom, frozen from an independent voxelisation
    assert ph.support.sum() == 1381
    assert set(np.unique(rho)) == {0.0, 0.4, 0.6, 1.0}
    # solid volume tracks the icosahedron volume to within one voxel layer
    assert abs(ph.support.sum() - icosahedron_volume(8.0)) < 0.25 * icosahedron_volume(8.0)
    np.testing.assert_array_equal(rho, rho[::-1, ::-1, ::-1])


def test_phantom_validation():
    with pytest.raises(ValueError):
        make_phantom(PhantomParams(outer_radius=30), 33)
    with pytest.raises(ValueError):
        make_phantom(PhantomParams(outer_radius=3, shell_thickness=(2, 2), gap=1), 33)
    with pytest.raises(ValueError):
        make_phantom(grid_size=64)


def test_truth_background_fraction(tiny_phantom, tiny_det):
    t0 = make_truth(tiny_phantom, tiny_det)
    assert t0.background_amplitude == 0.0
    t = make_truth(tiny_phantom, tiny_det, background_fraction=0.2, background_sigma=4.0)
    total = orientation_averaged_photons(t.intensity.values, tiny_det)
    part = orientation_averaged_photons(t.particle(), tiny_det)
    assert 1 - part / total == pytest.approx(0.2, rel=1e-9)
    I = t.intensity.values
    np.testing.assert_allclose(I, I[::-1, ::-1, ::-1], rtol=1e-12)


def test_expected_counts_zero_on_ignored(tiny_truth, tiny_det):
    lam = expected_counts(tiny_truth, tiny_det, [1, 0, 0, 0])
    assert np.all(lam[~tiny_det.used] == 0)
    assert np.all(lam >= 0)


def test_mean_photons_hit_target(tiny_truth, tiny_det):
    fl = fluence_for_photons(tiny_truth, tiny_det, 300.0)
    ds = simulate_dataset(tiny_truth, tiny_det, 400, FluenceDistribution(fl, 0.0), seed=3)
    n = np.array([f.total_photons for f in ds.frames])
    assert n.mean() == pytest.approx(300.0, rel=0.05)


def test_frames_are_poisson(tiny_truth, tiny_det):
    q = np.array([1.0, 0, 0, 0])
    lam = expected_counts(tiny_truth, tiny_det, q, 1e-3)
    p = int(np.argmax(lam))
    g = np.random.default_rng(7)
    k = np.array([simulate_frame(tiny_truth, tiny_det, q, 1e-3, g).to_dense(tiny_det.num_pixels)[p]
                  for _ in range(400)])
    # mean and variance of a Poisson count agree
    assert k.mean() == pytest.approx(lam[p], rel=0.15)
    assert k.var() == pytest.approx(lam[p], rel=0.3)


def test_dataset_is_reproducible_and_worker_independent(tiny_truth, tiny_det):
    a = simulate_dataset(tiny_truth, tiny_det, 20, FluenceDistribution(1.0, 0.3), seed=9)
    b = simulate_dataset(tiny_truth, tiny_det, 20, FluenceDistribution(1.0, 0.3), seed=9, workers=3)
    np.testing.assert_array_equal(a.quaternions, b.quaternions)
    for x, y in zip(a.frames, b.frames):
        np.testing.assert_array_equal(x.to_dense(tiny_det.num_pixels), y.to_dense(tiny_det.num_pixels))


def test_fluence_distribution():
    g = np.random.default_rng(0)
    d = FluenceDistribution(2.0, 0.3)
    s = np.array([d.sample(g) for _ in range(20000)])
    assert s.mean() == pytest.approx(2.0, rel=0.02)
    assert stats.kstest(np.log(s / 2.0) + 0.045, "norm", args=(0, 0.3)).pvalue > 0.01
    assert FluenceDistribution(2.0, 0.0).sample(g) == 2.0


def test_simulate_frame_validation(tiny_truth, tiny_det):
    g = np.random.default_rng(0)
    with pytest.raises(ValueError):
        simulate_frame(tiny_truth, tiny_det, [1, 0, 0, 0], 0.0, g)
    with pytest.raises(ValueError):
        simulate_frame(tiny_truth, tiny_det, [1, 1, 0, 0], 1.0, g)


def test_orientation_average_matches_monte_carlo(tiny_truth, tiny_det):
    from spi.geometry import random_rotations
    quats = random_rotations(3000, np.random.default_rng(11))
    mc = np.mean([expected_counts(tiny_truth, tiny_det, q).sum() for q in quats])
    assert orientation_averaged_photons(tiny_truth.intensity.values, tiny_det) == pytest.approx(mc, rel=0.01)
