"""Per-component seed derivation.

Every random stream is seeded from ``derive_seed(top_seed, component, index)``,
a stable 64-bit hash. Adding a new component never shifts the streams of
existing ones.
"""
import hashlib

import numpy as np


def derive_seed(seed, component, *index):
    key = "/".join([str(int(seed)), str(component), *(str(i) for i in index)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed, component, *index):
    return np.random.default_rng(derive_seed(seed, component, *index))
