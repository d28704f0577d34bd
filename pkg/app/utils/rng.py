"""
Counter-based random streams

Each purpose (init, data, shuffle, augment, drop_path) gets its own Philox
generator derived from the run seed and a fixed spawn key, so the draws of
one purpose never depend on how many numbers another purpose consumed.
"""

from typing import Dict, Tuple

import numpy as np
import torch

PURPOSES: Dict[str, int] = {
    "init": 0,
    "data": 1,
    "shuffle": 2,
    "augment": 3,
    "drop_path": 4,
    "bench": 5,
}


def philox(seed: int, *spawn_key: int) -> np.random.Generator:
    """Philox generator for an explicit (seed, spawn_key) pair"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=spawn_key)))


class RngStreams:
    """Per-purpose generators for one run"""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._numpy: Dict[Tuple[str, int], np.random.Generator] = {}
        self._torch: Dict[Tuple[str, int], torch.Generator] = {}

    def _key(self, purpose: str) -> int:
        if purpose not in PURPOSES:
            raise KeyError(f"Unknown RNG purpose '{purpose}'. Known: {sorted(PURPOSES)}")
        return PURPOSES[purpose]

    def numpy(self, purpose: str, index: int = 0) -> np.random.Generator:
        key = (purpose, index)
        if key not in self._numpy:
            self._numpy[key] = philox(self.seed, self._key(purpose), index)
        return self._numpy[key]

    def torch(self, purpose: str, index: int = 0) -> torch.Generator:
        key = (purpose, index)
        if key not in self._torch:
            seed = int(philox(self.seed, self._key(purpose), index, 1).integers(0, 2**63 - 1))
            generator = torch.Generator()
            generator.manual_seed(seed)
            self._torch[key] = generator
        return self._torch[key]
