import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of ints/strings."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
