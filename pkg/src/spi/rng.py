"""Counter-based random streams keyed by (seed, stream, index).

Every frame or replicate draws from its own Philox stream, so results do not
depend on how work is split across workers.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in key])
    return np.random.Generator(np.random.Philox(ss))
