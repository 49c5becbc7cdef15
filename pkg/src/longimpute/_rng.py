import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox stream keyed by ``(seed, *path)``.

    Streams for different paths do not overlap, so work split across
    imputations or replicates gives the same numbers in any execution order.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, path)])
    return np.random.Generator(np.random.Philox(ss))


def trace(seed: int, *path: int) -> str:
    return "philox:" + "/".join(str(int(v)) for v in (seed, *path))


def derive(seed: int, *path: int) -> int:
    """A 63-bit integer seed for the sub-task at ``path``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, path)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
