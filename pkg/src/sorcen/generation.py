"""Iterative (MaskGIT-style) token generation, inpainting and token-grid previews."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import assemble_decoder_input, decode_logits, encode, full_input, full_plan
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    steps: int = 20
    temp_start: float = 1.0
    temp_end: float = 0.1
    seed: int = 0
    chunk: int = 128

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("decoding needs at least one step")
        if self.temp_start <= 0 or self.temp_end <= 0:
            raise ValueError("temperatures must be > 0")

    def temperature(self, k):
        if self.steps == 1:
            return self.temp_start
        return self.temp_start + (self.temp_end - self.temp_start) * (k - 1) / (self.steps - 1)


def masked_count_at(k, T, S):
    """Positions still masked after step ``k`` of ``T`` (cosine schedule)."""
    if not 1 <= k <= T:
        raise ValueError(f"step {k} outside [1, {T}]")
    if k == T:
        return 0
    return int(math.floor(S * math.cos(math.pi * k / (2 * T))))


def _decoder_logits(params, cfg, seqs):
    ids, pos = full_input(seqs, cfg)
    with ad.no_grad():
        lat = encode(params, cfg, ids, pos, train=False)
        s = assemble_decoder_input(lat, [full_plan(row, cfg.mask_id) for row in seqs])
        return decode_logits(params, cfg, s, train=False).data.astype(np.float64)


def _decode_chunk(params, cfg, seqs, dcfg, rng, trace=None):
    seqs = seqs.copy()
    unknown = seqs == cfg.mask_id
    n0 = unknown.sum(axis=1)
    B, S = seqs.shape
    for k in range(1, dcfg.steps + 1):
        if not unknown.any():
            break
        temp = dcfg.temperature(k)
        logits = _decoder_logits(params, cfg, seqs)
        z = logits / temp
        z -= z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        cdf = np.cumsum(p, axis=-1)
        u = rng.random((B, S, 1)) * cdf[..., -1:]
        sampled = np.minimum((cdf <= u).sum(axis=-1), cfg.vocab - 1)
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        score = np.take_along_axis(logp, sampled[..., None], axis=-1)[..., 0]
        score = score + temp * rng.gumbel(size=(B, S))
        score[~unknown] = np.inf
        for b in range(B):
            if n0[b] == 0:
                continue
            keep_masked = masked_count_at(k, dcfg.steps, int(n0[b]))
            cur = int(unknown[b].sum())
            n_commit = cur - keep_masked
            if n_commit <= 0:
                continue
            cand = np.flatnonzero(unknown[b])
            order = cand[np.argsort(-score[b, cand], kind="stable")]
            chosen = order[:n_commit]
            seqs[b, chosen] = sampled[b, chosen]
            unknown[b, chosen] = False
        if trace is not None:
            trace.append(unknown.sum(axis=1).copy())
    return seqs


def iterative_decode(params, cfg, init, dcfg=None, trace=None):
    """Fill every mask token of ``init`` (B, S) over ``dcfg.steps`` decoder passes.

    Already-present tokens are never changed. If ``trace`` is a list, the
    per-sample masked count after each step is appended to it.
    """
    dcfg = dcfg or DecodeConfig()
    init = np.asarray(init)
    if init.ndim == 1:
        return iterative_decode(params, cfg, init[None], dcfg, trace)[0]
    if init.shape[1] != cfg.seq_len:
        raise ValueError(f"sequence length {init.shape[1]} does not match model seq_len {cfg.seq_len}")
    out = []
    for c, i in enumerate(range(0, init.shape[0], dcfg.chunk)):
        rng = stream(dcfg.seed, "decode", c)
        out.append(_decode_chunk(params, cfg, init[i : i + dcfg.chunk], dcfg, rng, trace))
    return np.concatenate(out, axis=0)


def generate(params, cfg, n, dcfg=None):
    """Unconditional samples: start from all-mask sequences."""
    init = np.full((n, cfg.seq_len), cfg.mask_id, dtype=np.int64)
    return iterative_decode(params, cfg, init, dcfg)


def rect_visible(grid, row, col, height, width):
    vis = np.zeros((grid, grid), bool)
    vis[row : row + height, col : col + width] = True
    return vis.reshape(-1)


def random_visible(seq_len, masked_fraction, rng):
    """Keep a random ``1 - masked_fraction`` share of positions visible."""
    n_mask = int(round(masked_fraction * seq_len))
    vis = np.ones(seq_len, bool)
    vis[rng.permutation(seq_len)[:n_mask]] = False
    return vis


def inpaint(params, cfg, seqs, visible, dcfg=None):
    """Regenerate the positions of ``seqs`` where ``visible`` is false.

    ``visible`` is a boolean array broadcastable to ``seqs``. Outpainting is
    the same call with a central visible region.
    """
    seqs = np.asarray(seqs)
    single = seqs.ndim == 1
    if single:
        seqs = seqs[None]
    visible = np.broadcast_to(np.asarray(visible, bool), seqs.shape)
    if not visible.any(axis=1).all():
        log.info("inpaint: empty visible set, falling back to unconditional generation")
    init = np.where(visible, seqs, cfg.mask_id)
    out = iterative_decode(params, cfg, init, dcfg)
    return out[0] if single else out


# ------------------------------------------------------------------ previews


def token_colors(vocab):
    """Deterministic RGB colour per token id."""
    cols = np.zeros((vocab, 3), np.uint8)
    for t in range(vocab):
        h = zlib.crc32(t.to_bytes(4, "little"))
        cols[t] = (h & 0xFF, (h >> 8) & 0xFF, (h >> 16) & 0xFF)
    return cols


def save_token_png(path, seqs, vocab, scale=8, per_row=8):
    """Tile token grids into a PNG; mask ids render as mid grey."""
    from PIL import Image

    seqs = np.atleast_2d(np.asarray(seqs))
    n, S = seqs.shape
    G = int(round(math.sqrt(S)))
    cols = np.concatenate([token_colors(vocab), np.full((max(2, seqs.max() + 1 - vocab), 3), 128, np.uint8)])
    rows = math.ceil(n / per_row)
    pad = 1
    canvas = np.full((rows * (G * scale + pad), per_row * (G * scale + pad), 3), 255, np.uint8)
    for i, seq in enumerate(seqs):
        img = cols[seq.reshape(G, G)].repeat(scale, 0).repeat(scale, 1)
        r, c = divmod(i, per_row)
        y, x = r * (G * scale + pad), c * (G * scale + pad)
        canvas[y : y + G * scale, x : x + G * scale] = img
    Image.fromarray(canvas).save(path)
