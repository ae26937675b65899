"""Counter-based random substreams.

Every random quantity in a run is drawn from a stream keyed by
``(root seed, purpose, index)``, so results never depend on execution order
or on how many workers share the load.
"""

from __future__ import annotations

import numpy as np

# purpose tags; part of the reproducibility contract, never renumber
POSITIONS = 0
INDIVIDUAL = 1
REPLICATE = 2


def root_sequence(seed, *key: int) -> np.random.SeedSequence:
    """Seed sequence for ``seed`` extended by the integer path ``key``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(key))


def stream(seed, *key: int) -> np.random.Generator:
    return np.random.default_rng(root_sequence(seed, *key))


def individual_key(seed) -> int:
    """64-bit Philox key shared by all per-individual streams of one run."""
    return int(root_sequence(seed, INDIVIDUAL).generate_state(1, np.uint64)[0])


def individual_stream(key: int, index: int) -> np.random.Generator:
    # Philox keyed by (run key, individual id): a distinct counter space per individual
    return np.random.Generator(np.random.Philox(key=[key, int(index)]))


def replicate_seed(master_seed: int, n: int, replicate: int) -> np.random.SeedSequence:
    """Seed for replicate ``replicate`` at population size ``n`` of a study."""
    return root_sequence(master_seed, REPLICATE, int(n), int(replicate))
