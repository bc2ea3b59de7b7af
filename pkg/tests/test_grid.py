import numpy as np
import pytest
from scipy import ndimage

from spi import grid


def test_centered_fft_matches_direct_sum():
    g = np.random.default_rng(0)
    v = g.random((5, 5, 5)) + 1j * g.random((5, 5, 5))
    k = np.arange(5) - 2
    phase = np.exp(-2j * np.pi * np.outer(k, k) / 5)
    direct = np.einsum("ai,bj,ck,ijk->abc", phase, phase, phase, v)
    np.testing.assert_allclose(grid.fft3(v), direct, atol=1e-12)
    np.testing.assert_allclose(grid.ifft3(grid.fft3(v)), v, atol=1e-14)


def test_real_density_gives_friedel_pair():
    v = np.random.default_rng(1).random((7, 7, 7))
    F = grid.fft3(v)
    np.testing.assert_allclose(F, np.conj(F[::-1, ::-1, ::-1]), atol=1e-12)


def test_shells_and_radial_mean():
    v = grid.radius((9, 9, 9))
    s = grid.shell_index((9, 9, 9))
    assert s[4, 4, 4] == 0 and s[4, 4, 8] == 4 and s[0, 0, 0] == int(np.floor(np.sqrt(48)))
    m = grid.radial_mean(np.ones((9, 9, 9)))
    np.testing.assert_allclose(m, 1.0)
    avg = grid.radial_average(v)
    assert np.all(np.floor(avg) == s)


def test_sample_matches_map_coordinates():
    g = np.random.default_rng(2)
    vol = g.random((11, 11, 11))
    pts = g.uniform(-4.0, 4.0, (500, 3))
    ref = ndimage.map_coordinates(vol, (pts + 5).T, order=1)
    np.testing.assert_allclose(grid.sample(vol, pts), ref, atol=1e-13)
    pts_nn = np.round(pts) + g.uniform(-0.4, 0.4, pts.shape)
    ref = ndimage.map_coordinates(vol, (pts_nn + 5).T, order=0)
    np.testing.assert_allclose(grid.sample(vol, pts_nn, "nearest"), ref)


def test_sample_outside_is_zero():
    vol = np.ones((5, 5, 5))
    assert grid.sample(vol, [[10.0, 0, 0]])[0] == 0.0


@pytest.mark.parametrize("mode", ["trilinear", "nearest"])
def test_scatter_is_adjoint_of_sample(mode):
    g = np.random.default_rng(3)
    vol = g.random((9, 9, 9))
    pts = g.uniform(-3.2, 3.2, (300, 3))
    vals = g.random(300)
    lhs = np.dot(grid.sample(vol, pts, mode), vals)
    rhs = np.sum(vol * grid.scatter(pts, vals, vol.shape, interpolation=mode))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_scatter_conserves_weight():
    pts = np.random.default_rng(4).uniform(-2, 2, (100, 3))
    out = grid.scatter(pts, 1.0, (7, 7, 7))
    assert out.sum() == pytest.approx(100.0)


def test_friedel_symmetrize():
    v = np.random.default_rng(5).random((5, 5, 5))
    s = grid.friedel_symmetrize(v)
    np.testing.assert_array_equal(s, s[::-1, ::-1, ::-1])
    with pytest.raises(ValueError):
        grid.friedel_symmetrize(np.zeros((4, 4, 4)))
