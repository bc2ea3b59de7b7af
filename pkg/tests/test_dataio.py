import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spi.dataio import (SparseFrame, ValueKind, VolumeGrid, frames_to_matrix, read_frames,
                        read_photon_file, read_quaternion_log, read_volume, write_frames,
                        write_quaternion_log, write_volume)
from spi.errors import FormatError

counts = arrays(np.int64, st.integers(1, 200), elements=st.integers(0, 6))


@given(counts)
def test_dense_roundtrip(c):
    fr = SparseFrame.from_dense(c, 3)
    np.testing.assert_array_equal(fr.to_dense(len(c)), c)
    assert fr.total_photons == c.sum()
    pix, cnt = fr.pixels_and_counts()
    np.testing.assert_array_equal(pix, np.flatnonzero(c))
    np.testing.assert_array_equal(cnt, c[c > 0])


def test_frame_validation():
    with pytest.raises(FormatError):
        SparseFrame([3, 1], [], [])
    with pytest.raises(FormatError):
        SparseFrame([1], [1], [2])
    with pytest.raises(FormatError):
        SparseFrame([], [2], [1])
    with pytest.raises(FormatError):
        SparseFrame([], [2, 3], [2])


@settings(max_examples=20, deadline=None)
@given(st.lists(counts.filter(lambda c: len(c) == 50) | arrays(np.int64, 50, elements=st.integers(0, 3)),
                min_size=0, max_size=8))
def test_photon_file_roundtrip(tmp_path_factory, dense):
    path = tmp_path_factory.mktemp("phot") / "a.phot"
    frames = [SparseFrame.from_dense(np.resize(c, 50), i) for i, c in enumerate(dense)]
    write_frames(frames, path, 50, {"note": "x"})
    pf = read_photon_file(path)
    assert pf.num_pixels == 50 and pf.metadata["note"] == "x"
    assert len(pf.frames) == len(frames)
    for a, b in zip(frames, pf.frames):
        np.testing.assert_array_equal(a.to_dense(50), b.to_dense(50))
        assert a.frame_id == b.frame_id


def test_photon_file_errors(tmp_path):
    p = tmp_path / "bad.phot"
    p.write_bytes(b"NOTPHOT\0" + b"\0" * 40)
    with pytest.raises(FormatError):
        read_frames(p)
    frames = [SparseFrame.from_dense([0, 2, 1, 0])]
    write_frames(frames, tmp_path / "ok.phot", 4)
    data = (tmp_path / "ok.phot").read_bytes()
    (tmp_path / "trunc.phot").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        read_frames(tmp_path / "trunc.phot")
    with pytest.raises((FormatError, ValueError)):
        write_frames(frames, tmp_path / "x.phot", 2)


def test_frames_to_matrix():
    frames = [SparseFrame.from_dense([0, 2, 1]), SparseFrame.from_dense([1, 0, 0])]
    m = frames_to_matrix(frames, 3)
    dense = m.toarray() if hasattr(m, "toarray") else np.asarray(m)
    np.testing.assert_array_equal(dense, [[0, 2, 1], [1, 0, 0]])


@pytest.mark.parametrize("kind", list(ValueKind))
def test_volume_roundtrip(tmp_path, kind):
    g = np.random.default_rng(1)
    v = g.random((5, 5, 5))
    if kind == ValueKind.COMPLEX:
        v = v + 1j * g.random((5, 5, 5))
    elif kind == ValueKind.REAL:
        v = v - 0.5
    write_volume(VolumeGrid(v, 0.25, kind), tmp_path / "v.vol")
    back = read_volume(tmp_path / "v.vol", expected_edge=5)
    assert back.kind == kind and back.voxel_size == 0.25
    np.testing.assert_array_equal(back.values, v)
    with pytest.raises(FormatError):
        read_volume(tmp_path / "v.vol", expected_edge=7)


def test_volume_validation():
    with pytest.raises(ValueError):
        VolumeGrid(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        VolumeGrid(np.zeros((3, 3, 5)))
    with pytest.raises(ValueError):
        VolumeGrid(-np.ones((3, 3, 3)), kind=ValueKind.NONNEGATIVE)
    with pytest.raises(ValueError):
        VolumeGrid(np.full((3, 3, 3), np.nan))


def test_quaternion_log(tmp_path):
    q = np.array([[1.0, 0, 0, 0], [0, 1, 0, 0]])
    write_quaternion_log(tmp_path / "q.txt", q, extra=np.array([0.5, 2.0]))
    back = read_quaternion_log(tmp_path / "q.txt")
    np.testing.assert_array_equal(back[:, :4], q)


def test_photon_list(tmp_path):
    a = [SparseFrame.from_dense(np.array([0, 1, 2, 0]), 0)]
    b = [SparseFrame.from_dense(np.array([3, 0, 0, 1]), 1), SparseFrame.from_dense(np.array([0, 0, 1, 0]), 2)]
    (tmp_path / "runs").mkdir()
    write_frames(a, tmp_path / "runs" / "a.phot", 4)
    write_frames(b, tmp_path / "b.phot", 4)
    lst = tmp_path / "list.txt"
    lst.write_text(f"# two runs\nruns/a.phot\n\n{tmp_path / 'b.phot'}\n")
    frames = read_frames(lst)
    assert [f.frame_id for f in frames] == [0, 1, 2]
    assert [f.total_photons for f in frames] == [3, 4, 1]
    lst.write_text("missing.phot\n")
    with pytest.raises(FileNotFoundError):
        read_frames(lst)
