"""Sparse photon frames (``.phot``), volumes (``.vol``) and quaternion logs.

Byte layouts are documented in ``docs/formats.md``. All multi-byte fields are
little-endian.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spi.errors import FormatError


@dataclass(frozen=True)
class SparseFrame:
    """Photon counts of one snapshot.

    Pixels hit by exactly one photon are listed in ``one_photon_pixels``;
    pixels with two or more photons are in ``multi_photon_pixels`` with their
    counts in ``multi_photon_counts``.
    """

    one_photon_pixels: np.ndarray
    multi_photon_pixels: np.ndarray
    multi_photon_counts: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        ones = np.asarray(self.one_photon_pixels, dtype=np.int32).reshape(-1)
        multi = np.asarray(self.multi_photon_pixels, dtype=np.int32).reshape(-1)
        counts = np.asarray(self.multi_photon_counts, dtype=np.int32).reshape(-1)
        if len(multi) != len(counts):
            raise FormatError("multi-photon pixels and counts differ in length")
        if np.any(np.diff(ones) <= 0) or np.any(np.diff(multi) <= 0):
            raise FormatError("pixel indices must be strictly increasing")
        if np.any(counts < 2):
            raise FormatError("multi-photon counts must be >= 2")
        if len(ones) and len(multi) and np.intersect1d(ones, multi).size:
            raise FormatError("a pixel appears in both photon lists")
        if (len(ones) and ones[0] < 0) or (len(multi) and multi[0] < 0):
            raise FormatError("negative pixel index")
        for arr in (ones, multi, counts):
            arr.flags.writeable = False
        object.__setattr__(self, "one_photon_pixels", ones)
        object.__setattr__(self, "multi_photon_pixels", multi)
        object.__setattr__(self, "multi_photon_counts", counts)
        object.__setattr__(self, "frame_id", int(self.frame_id))

    @property
    def total_photons(self) -> int:
        return len(self.one_photon_pixels) + int(self.multi_photon_counts.sum())

    @property
    def max_pixel(self) -> int:
        m = -1
        if len(self.one_photon_pixels):
            m = int(self.one_photon_pixels[-1])
        if len(self.multi_photon_pixels):
            m = max(m, int(self.multi_photon_pixels[-1]))
        return m

    @classmethod
    def from_dense(cls, counts, frame_id: int = 0) -> "SparseFrame":
        counts = np.asarray(counts).reshape(-1)
        ones = np.flatnonzero(counts == 1)
        multi = np.flatnonzero(counts >= 2)
        return cls(ones, multi, counts[multi], frame_id)

    @classmethod
    def empty(cls, frame_id: int = 0) -> "SparseFrame":
        return cls(np.empty(0), np.empty(0), np.empty(0), frame_id)

    def to_dense(self, num_pixels: int) -> np.ndarray:
        out = np.zeros(num_pixels, dtype=np.int64)
        out[self.one_photon_pixels] = 1
        out[self.multi_photon_pixels] = self.multi_photon_counts
        return out

    def pixels_and_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """All hit pixels (sorted) with their counts."""
        pix = np.concatenate([self.one_photon_pixels, self.multi_photon_pixels])
        cnt = np.concatenate([np.ones(len(self.one_photon_pixels), dtype=np.int32),
                              self.multi_photon_counts])
        order = np.argsort(pix, kind="stable")
        return pix[order], cnt[order]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseFrame):
            return NotImplemented
        return (self.frame_id == other.frame_id
                and np.array_equal(self.one_photon_pixels, other.one_photon_pixels)
                and np.array_equal(self.multi_photon_pixels, other.multi_photon_pixels)
                and np.array_equal(self.multi_photon_counts, other.multi_photon_counts))

    __hash__ = None


def frames_to_matrix(frames, num_pixels: int):
    """Stack frames into a ``scipy.sparse`` CSR matrix of shape (frames, pixels)."""
    from scipy import sparse

    rows, cols, vals = [], [], []
    for i, fr in enumerate(frames):
        pix, cnt = fr.pixels_and_counts()
        rows.append(np.full(len(pix), i, dtype=np.int64))
        cols.append(pix)
        vals.append(cnt)
    if rows:
        rows, cols, vals = (np.concatenate(a) for a in (rows, cols, vals))
    else:
        rows = cols = vals = np.empty(0, dtype=np.int64)
    return sparse.csr_matrix((vals.astype(np.float64), (rows, cols)),
                             shape=(len(frames), num_pixels))


# .phot layout:
#   8s  magic b"SPIPHOT\0"
#   u4  version (1)
#   u4  num_frames
#   u4  num_pixels
#   u4  metadata length L
#   L   UTF-8 JSON metadata (seed, provenance)
#   u8[num_frames + 1]  byte offsets of each frame record from file start
#   frame record: i8 frame_id | u4 n_one | u4 n_multi |
#                 i4[n_one] one-photon pixels | i4[n_multi] pixels | i4[n_multi] counts
PHOT_MAGIC = b"SPIPHOT\0"
PHOT_VERSION = 1


@dataclass
class PhotonFile:
    frames: list[SparseFrame]
    num_pixels: int
    metadata: dict = field(default_factory=dict)


def write_frames(frames, path, num_pixels: int, metadata: dict | None = None) -> None:
    """Write frames to a ``.phot`` file."""
    frames = list(frames)
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    records = []
    for fr in frames:
        if fr.max_pixel >= num_pixels:
            raise FormatError(f"frame {fr.frame_id} has pixel {fr.max_pixel} >= {num_pixels}")
        rec = struct.pack("<qII", fr.frame_id, len(fr.one_photon_pixels), len(fr.multi_photon_pixels))
        rec += fr.one_photon_pixels.astype("<i4").tobytes()
        rec += fr.multi_photon_pixels.astype("<i4").tobytes()
        rec += fr.multi_photon_counts.astype("<i4").tobytes()
        records.append(rec)
    header = PHOT_MAGIC + struct.pack("<IIII", PHOT_VERSION, len(frames), num_pixels, len(meta)) + meta
    start = len(header) + 8 * (len(frames) + 1)
    offsets = np.cumsum([start] + [len(r) for r in records]).astype("<u8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(offsets.tobytes())
        for rec in records:
            fh.write(rec)


def read_photon_file(path) -> PhotonFile:
    raw = Path(path).read_bytes()
    if raw[:8] != PHOT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a .phot file")
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header")
    version, nframes, npix, mlen = struct.unpack_from("<IIII", raw, 8)
    if version != PHOT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 24
    try:
        metadata = json.loads(raw[pos:pos + mlen].decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata block") from exc
    pos += mlen
    if len(raw) < pos + 8 * (nframes + 1):
        raise FormatError(f"{path}: truncated offset table")
    offsets = np.frombuffer(raw, dtype="<u8", count=nframes + 1, offset=pos)
    if offsets[-1] != len(raw) or np.any(np.diff(offsets.astype(np.int64)) < 16):
        raise FormatError(f"{path}: offset table inconsistent with file size")
    frames = []
    for i in range(nframes):
        off = int(offsets[i])
        fid, n1, nm = struct.unpack_from("<qII", raw, off)
        if off + 16 + 4 * (n1 + 2 * nm) != int(offsets[i + 1]):
            raise FormatError(f"{path}: frame {i} length mismatch")
        body = np.frombuffer(raw, dtype="<i4", count=n1 + 2 * nm, offset=off + 16)
        fr = SparseFrame(body[:n1], body[n1:n1 + nm], body[n1 + nm:], fid)
        if fr.max_pixel >= npix:
            raise FormatError(f"{path}: frame {i} pixel index out of detector range")
        frames.append(fr)
    return PhotonFile(frames, npix, metadata)


def read_frames(path) -> list[SparseFrame]:
    """Frames of one ``.phot`` file, or of every file named in a ``.txt``/``.lst`` list.

    List entries are one path per line, relative to the list file; blank lines
    and ``#`` comments are skipped.
    """
    path = Path(path)
    if path.suffix.lower() not in (".txt", ".lst"):
        return read_photon_file(path).frames
    frames = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            entry = Path(line)
            frames += read_photon_file(entry if entry.is_absolute() else path.parent / entry).frames
    return frames


# .vol layout:
#   8s magic b"SPIVOL\0\0" | u4 version | u4 edge length M | u4 value kind | f8 voxel_size
#   M**3 values, C order: f8 for real/nonnegative, complex128 (re, im) for complex
VOL_MAGIC = b"SPIVOL\0\0"


class ValueKind(enum.IntEnum):
    REAL = 0
    COMPLEX = 1
    NONNEGATIVE = 2


@dataclass
class VolumeGrid:
    values: np.ndarray
    voxel_size: float = 1.0
    kind: ValueKind = ValueKind.REAL

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"volume must be a cube, got shape {v.shape}")
        if v.shape[0] % 2 == 0:
            raise ValueError("volume edge length must be odd")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        self.kind = ValueKind(self.kind)
        if np.iscomplexobj(v) and self.kind != ValueKind.COMPLEX:
            self.kind = ValueKind.COMPLEX
        if self.kind == ValueKind.NONNEGATIVE and np.any(v < 0):
            raise ValueError("nonnegative volume has negative values")
        self.values = v.astype(np.complex128 if self.kind == ValueKind.COMPLEX else np.float64)

    @property
    def edge_length(self) -> int:
        return self.values.shape[0]


def write_volume(vol: VolumeGrid, path) -> None:
    dtype = "<c16" if vol.kind == ValueKind.COMPLEX else "<f8"
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(struct.pack("<IIId", 1, vol.edge_length, int(vol.kind), vol.voxel_size))
        fh.write(np.ascontiguousarray(vol.values, dtype=dtype).tobytes())


def read_volume(path, expected_edge: int | None = None) -> VolumeGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != VOL_MAGIC:
        raise FormatError(f"{path}: not a .vol file")
    version, m, kind, voxel_size = struct.unpack_from("<IIId", raw, 8)
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        kind = ValueKind(kind)
    except ValueError as exc:
        raise FormatError(f"{path}: unknown value kind {kind}") from exc
    if expected_edge is not None and m != expected_edge:
        raise FormatError(f"{path}: edge length {m}, expected {expected_edge}")
    dtype = np.dtype("<c16" if kind == ValueKind.COMPLEX else "<f8")
    if len(raw) - 28 != m ** 3 * dtype.itemsize:
        raise FormatError(f"{path}: data size does not match edge length {m}")
    values = np.frombuffer(raw, dtype=dtype, offset=28).reshape(m, m, m).copy()
    return VolumeGrid(values, voxel_size, kind)


def write_quaternion_log(path, quats, extra=None, header: str = "w x y z") -> None:
    """Text table of quaternions with optional extra columns (e.g. fluence)."""
    cols = [np.asarray(quats, dtype=np.float64).reshape(-1, 4)]
    if extra is not None:
        cols.append(np.asarray(extra, dtype=np.float64).reshape(len(cols[0]), -1))
    np.savetxt(path, np.hstack(cols), fmt="%.17g", header=header)


def read_quaternion_log(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2, comments="#")
