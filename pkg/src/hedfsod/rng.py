"""Named random substreams derived from one root seed.

Every consumer draws from its own stream so disabling a feature (say,
augmentation) never shifts the numbers another feature sees. A stream seed
is ``SeedSequence([root, crc32(name)])``; nested names such as
``"data/domain3"`` are allowed.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAM_NAMES = ("data", "augment", "dn", "reinit", "init", "shuffle")


def stream_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def numpy_stream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))


def torch_stream(root: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(root, name))
    return g
