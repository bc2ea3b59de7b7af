"""Photon thinning, random frame subsets and odd/even splits."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from spi import rng as rngmod
from spi.dataio import SparseFrame


def thin_frame(frame: SparseFrame, p: float, rng: np.random.Generator) -> SparseFrame:
    """Keep each photon independently with probability ``p``.

    A pixel holding ``k`` photons keeps ``Binomial(k, p)`` of them, which has
    the same distribution as ``k`` independent Bernoulli trials.
    """
    if p == 1:
        return frame
    pix, cnt = frame.pixels_and_counts()
    kept = rng.binomial(cnt, p) if len(cnt) else cnt
    ones = pix[kept == 1]
    multi = kept >= 2
    return SparseFrame(ones, pix[multi], kept[multi], frame.frame_id)


def thin_photons(frames, p, seed: int) -> list[SparseFrame]:
    """Thin every frame; frame ``i`` draws from stream ``(seed, 1, i)``."""
    p = float(Fraction(p)) if isinstance(p, str) else float(p)
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if p == 1:
        return list(frames)
    if p == 0:
        return [SparseFrame.empty(fr.frame_id) for fr in frames]
    return [thin_frame(fr, p, rngmod.stream(seed, 1, i)) for i, fr in enumerate(frames)]


def split_odd_even(frames):
    """(1st, 3rd, 5th, ...) and (2nd, 4th, ...) frames by position."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames to split")
    return frames[0::2], frames[1::2]


def select(frames, selection: str):
    """Apply an ``odd_only`` / ``even_only`` / ``all`` selection (1-based parity)."""
    frames = list(frames)
    if selection == "all":
        return frames
    if selection == "odd_only":
        return frames[0::2]
    if selection == "even_only":
        return frames[1::2]
    raise ValueError(f"unknown selection {selection!r}")


def random_subset(frames, n: int, seed: int):
    """``n`` frames drawn uniformly without replacement, in original order."""
    frames = list(frames)
    if not 0 <= n <= len(frames):
        raise ValueError(f"cannot draw {n} of {len(frames)} frames")
    idx = np.sort(rngmod.stream(seed, 2).choice(len(frames), size=n, replace=False))
    return [frames[i] for i in idx]
