import logging

import numpy as np

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Seed for run `index` of a sweep rooted at `base_seed`.

    One splitmix64 round over ``base_seed + golden_gamma * (index + 1)``,
    truncated to 63 bits so it fits a signed SQLite integer.
    """
    state = (base_seed + 0x9E3779B97F4A7C15 * (index + 1)) & _MASK64
    derived = splitmix64(state) >> 1
    logger.debug("derive_seed base_seed=%s index=%s derived=%s", base_seed, index, derived)
    return derived


def rng_for(base_seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, stream))
