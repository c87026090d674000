"""Bit-packed ``.stok`` token datasets and a synthetic token generator.

File layout (little-endian)::

    magic "STOK" | version u16 | vocab u32 | seq_len u32 | count u64 | labeled u8
    count records of ceil(seq_len * bits / 8) bytes, bits = ceil(log2 vocab)
    count u32 labels (only when labeled)

Tokens are written LSB-first into a continuous bitstream, so a record with
vocab 1024 and 256 tokens takes 320 bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

MAGIC = b"STOK"
VERSION = 1
HEADER = struct.Struct("<4sHIIQB")


class TokenFormatError(ValueError):
    pass


def bits_per_token(vocab):
    if vocab < 2:
        raise TokenFormatError(f"vocab must be >= 2, got {vocab}")
    return math.ceil(math.log2(vocab))


def record_nbytes(seq_len, vocab):
    return math.ceil(seq_len * bits_per_token(vocab) / 8)


def dataset_nbytes(count, seq_len, vocab, labeled=False):
    """Exact size in bytes of a ``.stok`` file holding ``count`` records."""
    return HEADER.size + count * record_nbytes(seq_len, vocab) + (4 * count if labeled else 0)


@dataclass(frozen=True)
class DatasetHeader:
    vocab: int
    seq_len: int
    count: int
    labeled: bool = False
    version: int = VERSION

    @property
    def bits(self):
        return bits_per_token(self.vocab)

    @property
    def record_bytes(self):
        return record_nbytes(self.seq_len, self.vocab)

    def pack(self):
        return HEADER.pack(MAGIC, self.version, self.vocab, self.seq_len, self.count, int(self.labeled))

    @classmethod
    def unpack(cls, raw):
        if len(raw) < HEADER.size:
            raise TokenFormatError(f"header truncated: {len(raw)} of {HEADER.size} bytes")
        magic, version, vocab, seq_len, count, labeled = HEADER.unpack(raw[: HEADER.size])
        if magic != MAGIC:
            raise TokenFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise TokenFormatError(f"unsupported format version {version}")
        return cls(vocab, seq_len, count, bool(labeled), version)


# ---------------------------------------------------------------- bit packing


def pack_records(ids, vocab):
    """Pack an (n, S) integer array into an (n, record_bytes) uint8 array."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    bits = bits_per_token(vocab)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = np.argwhere((ids < 0) | (ids >= vocab))[0]
        raise TokenFormatError(
            f"token {int(ids[tuple(bad)])} at position {tuple(int(i) for i in bad)} "
            f"is outside [0, {vocab})"
        )
    n, S = ids.shape
    shifts = np.arange(bits, dtype=np.uint32)
    bitmat = ((ids.astype(np.uint32)[..., None] >> shifts) & 1).astype(np.uint8)
    flat = bitmat.reshape(n, S * bits)
    nbytes = record_nbytes(S, vocab)
    pad = nbytes * 8 - S * bits
    if pad:
        flat = np.concatenate([flat, np.zeros((n, pad), np.uint8)], axis=1)
    return np.packbits(flat, axis=1, bitorder="little")


def unpack_records(raw, vocab, seq_len):
    """Inverse of :func:`pack_records`; ``raw`` is (n, record_bytes) uint8."""
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim == 1:
        raw = raw[None]
    bits = bits_per_token(vocab)
    expected = record_nbytes(seq_len, vocab)
    if raw.shape[1] != expected:
        raise TokenFormatError(f"record length {raw.shape[1]} bytes, expected {expected}")
    flat = np.unpackbits(raw, axis=1, bitorder="little")[:, : seq_len * bits]
    weights = (1 << np.arange(bits, dtype=np.int64))
    ids = flat.reshape(raw.shape[0], seq_len, bits).astype(np.int64) @ weights
    if ids.size and ids.max() >= vocab:
        bad = np.argwhere(ids >= vocab)[0]
        raise TokenFormatError(
            f"corrupt stream: decoded id {int(ids[tuple(bad)])} >= vocab {vocab} "
            f"at record {int(bad[0])}, position {int(bad[1])}"
        )
    return ids


def pack_record(seq, vocab):
    return pack_records(np.asarray(seq)[None], vocab)[0].tobytes()


def unpack_record(data, vocab, seq_len):
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    expected = record_nbytes(seq_len, vocab)
    if raw.size != expected:
        raise TokenFormatError(f"record length {raw.size} bytes, expected {expected}")
    return unpack_records(raw[None], vocab, seq_len)[0]


# ------------------------------------------------------------------- file I/O


def write_dataset(path, ids, vocab, labels=None, chunk=4096):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise TokenFormatError(f"records must be a 2-D array, got shape {ids.shape}")
    n, S = ids.shape
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise TokenFormatError(f"label count {labels.shape[0]} != record count {n}")
        if labels.size and (labels.min() < 0 or labels.max() >= 2**32):
            raise TokenFormatError("labels must fit in unsigned 32 bits")
    header = DatasetHeader(vocab, S, n, labels is not None)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(header.pack())
        for i in range(0, n, chunk):
            f.write(pack_records(ids[i : i + chunk], vocab).tobytes())
        if labels is not None:
            f.write(labels.astype("<u4").tobytes())
    return header


def read_header(path):
    with open(path, "rb") as f:
        return DatasetHeader.unpack(f.read(HEADER.size))


class TokenDataset:
    """Random-access reader over a ``.stok`` file backed by a memory map.

    Distinct record ranges can be read from several threads at once.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.header = read_header(self.path)
        h = self.header
        expected = dataset_nbytes(h.count, h.seq_len, h.vocab, h.labeled)
        actual = self.path.stat().st_size
        if actual != expected:
            raise TokenFormatError(
                f"{self.path}: size {actual} bytes does not match header ({expected} bytes "
                f"for {h.count} records)"
            )
        self._payload = None
        if h.count:
            self._payload = np.memmap(
                self.path, dtype=np.uint8, mode="r", offset=HEADER.size,
                shape=(h.count, h.record_bytes),
            )
        self._labels = None
        if h.labeled and h.count:
            self._labels = np.memmap(
                self.path, dtype="<u4", mode="r",
                offset=HEADER.size + h.count * h.record_bytes, shape=(h.count,),
            )

    def __len__(self):
        return self.header.count

    def records(self, start=0, stop=None):
        stop = len(self) if stop is None else min(stop, len(self))
        if stop <= start:
            return np.zeros((0, self.header.seq_len), dtype=np.int64)
        return unpack_records(self._payload[start:stop], self.header.vocab, self.header.seq_len)

    def labels(self, start=0, stop=None):
        if not self.header.labeled:
            return None
        stop = len(self) if stop is None else min(stop, len(self))
        if stop <= start:
            return np.zeros(0, dtype=np.int64)
        return np.asarray(self._labels[start:stop], dtype=np.int64)

    def iter_batches(self, batch=1024):
        for i in range(0, len(self), batch):
            yield self.records(i, i + batch), self.labels(i, i + batch)


def read_dataset(path):
    """Load a whole file: returns ``(header, ids, labels-or-None)``."""
    ds = TokenDataset(path)
    return ds.header, ds.records(), ds.labels()


# ----------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Class-prototype token grids with random corruption.

    Each class owns ``prototypes_per_class`` grids drawn uniformly over the
    vocabulary. A sample copies one of them, replaces each token with a
    background draw with probability ``rho`` and optionally rolls the grid
    by a random toroidal offset.
    """

    classes: int = 8
    prototypes_per_class: int = 1
    grid: int = 8
    vocab: int = 64
    rho: float = 0.2
    background: np.ndarray | None = None
    shift: bool = False
    seed: int = 0
    prototypes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.classes < 1 or self.prototypes_per_class < 1 or self.grid < 1:
            raise ValueError("classes, prototypes_per_class and grid must be >= 1")
        if self.background is None:
            self.background = np.full(self.vocab, 1.0 / self.vocab)
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (self.vocab,) or bg.min() < 0 or bg.sum() <= 0:
            raise ValueError("background weights must be non-negative with one entry per token")
        self.background = bg / bg.sum()
        rng = stream(self.seed, "prototypes")
        self.prototypes = rng.integers(
            0, self.vocab, size=(self.classes, self.prototypes_per_class, self.seq_len)
        )

    @property
    def seq_len(self):
        return self.grid * self.grid


def generate_synthetic(spec, n, split=0):
    """Draw ``n`` labeled samples; ``split`` selects an independent sample stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(spec.seed, "samples", split)
    labels = rng.integers(0, spec.classes, size=n)
    which = rng.integers(0, spec.prototypes_per_class, size=n)
    ids = spec.prototypes[labels, which].copy()
    corrupt = rng.random(ids.shape) < spec.rho
    noise = rng.choice(spec.vocab, size=ids.shape, p=spec.background)
    ids[corrupt] = noise[corrupt]
    if spec.shift:
        G = spec.grid
        offs = rng.integers(0, G, size=(n, 2))
        grids = ids.reshape(n, G, G)
        for i in range(n):
            grids[i] = np.roll(grids[i], tuple(offs[i]), axis=(0, 1))
        ids = grids.reshape(n, G * G)
    return ids, labels
