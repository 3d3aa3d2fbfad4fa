"""Counter-based random streams keyed by (seed, stage, index)."""
import zlib

import numpy as np


def stream(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    key = zlib.crc32(stage.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key, int(index)])
    return np.random.Generator(np.random.Philox(ss))
