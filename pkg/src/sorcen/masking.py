"""Mask&Drop for the reconstruction branch and jittered spatial masking for echoes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RATIO_MEAN = 0.55
RATIO_STD = 0.25
RATIO_LOW = 0.5
RATIO_HIGH = 1.0


def sample_mask_ratio(rng, mean=RATIO_MEAN, std=RATIO_STD, low=RATIO_LOW, high=RATIO_HIGH, size=None):
    """Normal(mean, std) truncated to [low, high] by rejection."""
    if std <= 0:
        r = float(np.clip(mean, low, high))
        return r if size is None else np.full(size, r)
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(0)
    while out.size < n:
        draw = rng.normal(mean, std, size=max(2 * (n - out.size), 16))
        out = np.concatenate([out, draw[(draw >= low) & (draw <= high)]])
    out = out[:n]
    return float(out[0]) if size is None else out.reshape(size)


def truncated_normal_mean(mean=RATIO_MEAN, std=RATIO_STD, low=RATIO_LOW, high=RATIO_HIGH):
    """Mean of the truncated normal by direct numerical integration of its density."""
    from scipy import integrate

    dens = lambda x: np.exp(-0.5 * ((x - mean) / std) ** 2)
    z, _ = integrate.quad(dens, low, high, epsabs=1e-14, epsrel=1e-13)
    m, _ = integrate.quad(lambda x: x * dens(x), low, high, epsabs=1e-14, epsrel=1e-13)
    return m / z


@dataclass
class MaskPlan:
    """Per-sample Mask&Drop record.

    ``mask`` has length S (True = masked). ``retained`` lists the original
    indices kept in the encoder input, in ascending order, and always has
    length S // 2.
    """

    ratio: float
    mask: np.ndarray
    retained: np.ndarray

    @property
    def seq_len(self):
        return self.mask.size

    @property
    def dropped(self):
        keep = np.zeros(self.mask.size, bool)
        keep[self.retained] = True
        return np.flatnonzero(~keep)

    @property
    def num_masked(self):
        return int(self.mask.sum())


def retained_length(seq_len):
    if seq_len % 2:
        raise ValueError(f"sequence length must be even for Mask&Drop, got {seq_len}")
    return seq_len // 2


def plan_mask_and_drop(seq_len, rng, ratio=None):
    L = retained_length(seq_len)
    r = sample_mask_ratio(rng) if ratio is None else float(ratio)
    n_mask = int(round(r * seq_len))
    n_mask = min(max(n_mask, seq_len - L), seq_len)
    perm = rng.permutation(seq_len)
    masked_idx = perm[:n_mask]
    mask = np.zeros(seq_len, bool)
    mask[masked_idx] = True
    visible = np.flatnonzero(~mask)
    # fill the encoder input up to L with uniformly chosen masked positions
    extra = rng.permutation(masked_idx)[: L - visible.size]
    retained = np.sort(np.concatenate([visible, extra]))
    return MaskPlan(r, mask, retained)


def mask_and_drop(seq, rng, mask_id, extra_id, ratio=None):
    """Returns ``(encoder ids of length S/2 + 1, positions, plan)``.

    ``positions`` indexes the positional table: 0 for the extra token and
    ``i + 1`` for original grid index ``i``.
    """
    seq = np.asarray(seq)
    plan = plan_mask_and_drop(seq.size, rng, ratio)
    kept = seq[plan.retained].copy()
    kept[plan.mask[plan.retained]] = mask_id
    ids = np.concatenate([[extra_id], kept])
    pos = np.concatenate([[0], plan.retained + 1])
    return ids, pos, plan


def mask_and_drop_batch(seqs, rngs, mask_id, extra_id, ratios=None):
    out = [
        mask_and_drop(s, r, mask_id, extra_id, None if ratios is None else ratios[i])
        for i, (s, r) in enumerate(zip(seqs, rngs))
    ]
    ids = np.stack([o[0] for o in out])
    pos = np.stack([o[1] for o in out])
    return ids, pos, [o[2] for o in out]


@dataclass
class JsmPlan:
    size: int
    row: int
    col: int


def default_jsm_range(grid):
    return max(1, grid // 4), max(1, (3 * grid) // 4)


def plan_jsm(grid, rng, size_range=None):
    lo, hi = default_jsm_range(grid) if size_range is None else size_range
    if not 1 <= lo <= hi <= grid:
        raise ValueError(f"JSM size range ({lo}, {hi}) must lie within [1, {grid}]")
    n = int(rng.integers(lo, hi + 1))
    row = int(rng.integers(0, grid - n + 1))
    col = int(rng.integers(0, grid - n + 1))
    return JsmPlan(n, row, col)


def jsm_visible(grid, plan):
    vis = np.zeros((grid, grid), bool)
    vis[plan.row : plan.row + plan.size, plan.col : plan.col + plan.size] = True
    return vis.reshape(-1)


def jittered_spatial_mask(echo, rng, mask_id, grid=None, size_range=None, plan=None):
    """Keep one random N x N square of the grid, set every other token to ``mask_id``."""
    echo = np.asarray(echo)
    if grid is None:
        grid = int(round(np.sqrt(echo.size)))
    if grid * grid != echo.size:
        raise ValueError(f"sequence of length {echo.size} is not a square grid")
    if plan is None:
        plan = plan_jsm(grid, rng, size_range)
    out = np.where(jsm_visible(grid, plan), echo, mask_id)
    return out, plan


def jsm_visibility_probability(grid, size_range=None):
    """Exact per-cell visibility probability, enumerating every size and placement."""
    lo, hi = default_jsm_range(grid) if size_range is None else size_range
    prob = np.zeros((grid, grid))
    sizes = range(lo, hi + 1)
    for n in sizes:
        places = grid - n + 1
        acc = np.zeros((grid, grid))
        for r in range(places):
            for c in range(places):
                acc[r : r + n, c : c + n] += 1
        prob += acc / places**2
    return (prob / len(sizes)).reshape(-1)
