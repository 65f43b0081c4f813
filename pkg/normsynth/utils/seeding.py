"""
Seed derivation for every stochastic step

Streams are keyed by (config seed, stage name, image key) so results do not
depend on execution order or on how many workers run.
"""
import zlib

import numpy as np


def _key(value) -> int:
    return zlib.crc32(str(value).encode('utf-8'))


def derive_seed(seed, stage: str, key='') -> int:
    """
    Deterministic 32-bit seed for one stage and image

    Args:
        seed: Configured base seed
        stage: Stage name, e.g. 'sample' or 'bootstrap'
        key: Image id or index within the stage

    Returns:
        Non-negative integer usable with numpy.random.default_rng
    """
    sequence = np.random.SeedSequence([int(seed), _key(stage), _key(key)])
    return int(sequence.generate_state(1)[0])


def stage_rng(seed, stage: str, key='') -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stage, key))
