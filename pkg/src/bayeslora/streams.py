"""Named random streams derived from one root seed.

A stream id is a path of names (module, purpose, ...). Seeds are hashed from
the root seed and the id, so adding a new stream never shifts existing ones.
"""

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *names) -> int:
    key = "/".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & (2**63 - 1)


def torch_stream(root: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *names))
    return g


def numpy_stream(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
