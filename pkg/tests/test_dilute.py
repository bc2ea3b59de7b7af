import numpy as np
import pytest
from scipy import stats

from spi.dataio import SparseFrame
from spi.dilute import random_subset, select, split_odd_even, thin_frame, thin_photons


def _frames(n=200, npix=100, lam=3.0, seed=0):
    g = np.random.default_rng(seed)
    return [SparseFrame.from_dense(g.poisson(lam, npix), i) for i in range(n)]


def test_thinning_is_binomial():
    fr = SparseFrame.from_dense(np.full(50, 8))
    kept = np.array([thin_frame(fr, 0.25, np.random.default_rng(s)).to_dense(50) for s in range(200)]).ravel()
    obs = np.bincount(kept, minlength=9)[:9]
    exp = stats.binom.pmf(np.arange(9), 8, 0.25) * kept.size
    merged_obs = np.r_[obs[:5], obs[5:].sum()]
    merged_exp = np.r_[exp[:5], exp[5:].sum()]
    assert stats.chisquare(merged_obs, merged_exp).pvalue > 0.01


def test_thinning_never_adds_photons():
    frames = _frames()
    thin = thin_photons(frames, "1/4", seed=1)
    for a, b in zip(frames, thin):
        assert np.all(b.to_dense(100) <= a.to_dense(100))
        assert a.frame_id == b.frame_id


def test_thinning_edge_cases():
    frames = _frames(10)
    assert thin_photons(frames, 1, 0) == frames
    assert all(f.total_photons == 0 for f in thin_photons(frames, 0, 0))
    with pytest.raises(ValueError):
        thin_photons(frames, 1.5, 0)


def test_thinning_is_reproducible():
    frames = _frames(20)
    a = thin_photons(frames, 0.5, 4)
    b = thin_photons(frames, 0.5, 4)
    c = thin_photons(frames, 0.5, 5)
    assert all(np.array_equal(x.to_dense(100), y.to_dense(100)) for x, y in zip(a, b))
    assert not all(np.array_equal(x.to_dense(100), y.to_dense(100)) for x, y in zip(a, c))


def test_split_and_select():
    frames = _frames(7)
    odd, even = split_odd_even(frames)
    assert [f.frame_id for f in odd] == [0, 2, 4, 6]
    assert [f.frame_id for f in even] == [1, 3, 5]
    assert select(frames, "odd_only") == odd and select(frames, "even_only") == even
    assert select(frames, "all") == frames
    with pytest.raises(ValueError):
        split_odd_even(frames[:1])


def test_random_subset():
    frames = _frames(50)
    sub = random_subset(frames, 10, 3)
    ids = [f.frame_id for f in sub]
    assert len(set(ids)) == 10 and ids == sorted(ids)
    assert [f.frame_id for f in random_subset(frames, 10, 3)] == ids
    assert len(random_subset(frames, 50, 0)) == 50
    with pytest.raises(ValueError):
        random_subset(frames, 51, 0)
