import zlib

import numpy as np


def master_sequence(seed=1000):
    return np.random.SeedSequence(int(seed))


def spawn_generators(seed, n):
    """
    Independent random streams derived from one master seed, one per work item.
    Stream i depends only on (seed, i), so results do not depend on how the work is split
    across joblib workers.
    """
    return [np.random.default_rng(s) for s in master_sequence(seed).spawn(n)]


def generation_rng(seed, generation):
    """Random stream used to reorder the training set at the start of one generation."""
    return np.random.default_rng([int(seed), int(generation)])


def shuffle_rng(seed):
    return np.random.default_rng(master_sequence(seed))


def stage_seed(seed, name):
    """Integer seed for one named classifier; stable across runs and independent of training order."""
    sequence = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])
