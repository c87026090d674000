"""
Token datasets and bit-packed storage
=====================================

A dataset is a stack of token grids: one integer per image patch, drawn from
a vocabulary of V codes. Here we build a small synthetic one, write it to a
``.stok`` file, read it back, and check how much space the ImageNet-sized
version would take.
"""

from pathlib import Path

import numpy as np

from sorcen.tokens import (
    SyntheticSpec,
    TokenDataset,
    bits_per_token,
    dataset_nbytes,
    generate_synthetic,
    record_nbytes,
    write_dataset,
)

out = Path("demo_out")
out.mkdir(exist_ok=True)

###############################################################################
# Synthetic data: every class owns a prototype grid, samples are noisy copies
spec = SyntheticSpec(classes=8, grid=8, vocab=64, rho=0.25, seed=0)
X, y = generate_synthetic(spec, 4096, split=0)
print(X.shape, np.bincount(y))

# share of tokens that still match their class prototype (about 1 - rho)
print("matches prototype:", np.mean(X == spec.prototypes[y, 0]).round(3))

# one sample next to its prototype
print(spec.prototypes[y[0], 0].reshape(8, 8))
print(X[0].reshape(8, 8))

###############################################################################
# Pack and read back. 64 codes need 6 bits, so a 64-token grid is 48 bytes
print("bits per token:", bits_per_token(64), "record bytes:", record_nbytes(64, 64))
write_dataset(out / "train.stok", X, 64, y)
ds = TokenDataset(out / "train.stok")
print(ds.header)
assert np.array_equal(ds.records(0, 10), X[:10])
assert np.array_equal(ds.labels(), y)

# streaming access for data that does not fit in memory
n = sum(len(ids) for ids, _ in ds.iter_batches(1000))
print("streamed", n, "records")

###############################################################################
# Storage for 1,281,167 grids of 16x16 tokens over a 1024-code book
full = dataset_nbytes(1_281_167, 256, 1024)
print(f"{full / 2**30:.3f} GiB  ({full / 1e9:.3f} GB)")
