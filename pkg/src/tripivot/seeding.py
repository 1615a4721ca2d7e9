"""Named deterministic RNG substreams.

Every consumer of randomness owns a named stream derived from the stage
seed plus its indices (epoch, record number, ...), so adding or removing
one consumer never shifts the draws of another, and resuming at an epoch
boundary reproduces the exact stream.
"""

import numpy as np

_STREAMS = {
    "init": 0,        # encoder parameter init (per tower)
    "order": 1,       # per-epoch data order
    "frame": 2,       # training-time frame choice
    "mask": 3,        # spectrogram masking
    "caption": 4,     # which gold caption feeds a step
    "record": 5,      # per-record world noise
    "class-visual": 6,
    "class-audio": 7,
    "curation": 8,    # random pairing
    "fewshot": 9,     # few-shot subset permutation
    "world": 10,      # split-level draws
}


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for stream `name` of stage seed `seed` at `indices`."""
    return np.random.default_rng([int(seed), _STREAMS[name],
                                  *[int(i) for i in indices]])
