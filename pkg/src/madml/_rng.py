"""Seeded random substreams keyed by integer tuples."""
import numpy as np

# substream tags
PENALTY_BOOT = 1
CV_FOLDS = 2
UNIFORM_BANDS = 3
SIM_REP = 4
SIM_CALIBRATE = 5

ARM_CODES = {"treated": 1, "control": 0, "anchor": 2}


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, keys)``; identical across runs,
    threads and call order."""
    ss = np.random.SeedSequence(int(seed) % (1 << 64), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
