from __future__ import annotations

import numpy as np

from .rng import SplitMix64


def he_normal_init(shape, fan_in: int, seed: int | SplitMix64 = 0) -> np.ndarray:
    """I.i.d. N(0, 2 / fan_in) weights from a SplitMix64 stream."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = seed if isinstance(seed, SplitMix64) else SplitMix64(seed)
    n = int(np.prod(shape))
    return (rng.normal(n) * np.sqrt(2.0 / fan_in)).reshape(shape)
