"""Named random streams derived from one experiment seed."""

import numpy as np

STREAMS = {
    "model_init": 0,
    "peft_init": 1,
    "data": 2,
    "shuffle": 3,
    "perturb": 4,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; ``extra`` ints subdivide it (e.g. per split or epoch)."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, extra)]))
