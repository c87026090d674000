"""Counter-based random streams.

Every stream is a Philox generator keyed by the run seed plus a tuple of
integers naming its purpose (step number, epoch, sample index, ...). No
generator state has to be carried across steps, which is what makes resumed
runs replay exactly.
"""

import os
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def stream(seed, *keys):
    """Independent generator for ``(seed, *keys)``; string keys are hashed."""
    ss = np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def resolve_seed(seed):
    """``SORCEN_SEED`` in the environment overrides the configured seed."""
    env = os.environ.get("SORCEN_SEED")
    return int(env) if env not in (None, "") else int(seed)
