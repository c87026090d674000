"""Reconstruction loss, echo sampling and the echo contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import jittered_spatial_mask

UNIFORMITY_WEIGHT = 0.1


@dataclass
class LossConfig:
    lam: float = 0.1
    tau: float = 0.2
    top_k: int = 15
    label_smoothing: float = 0.1
    variant: str = "infonce"  # or "l2"
    uniformity: bool = True
    predictor: bool = True
    jsm: bool = True
    echo: bool = True
    jsm_range: tuple | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.tau <= 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 2:
            raise ValueError("top-K must be >= 2")
        if self.variant not in ("infonce", "l2"):
            raise ValueError(f"unknown contrastive variant {self.variant!r}")


def recon_loss(logits, targets, mask, smoothing=0.1):
    """Label-smoothed cross-entropy over masked positions, divided by the masked count."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    B, S, V = logits.shape
    if targets.shape != (B, S) or mask.shape != (B, S):
        raise ValueError(f"recon_loss: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("recon_loss: no masked positions")
    dt = logits.dtype
    q = np.full((B, S, V), smoothing / V, dtype=dt)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / V, axis=-1)
    per_pos = ad.sum_(ad.mul(ad.log_softmax(logits), Tensor(q)), axis=-1)
    w = Tensor(np.where(mask, -1.0 / n, 0.0).astype(dt))
    return ad.sum_(ad.mul(per_pos, w))


def rank_candidates(logits, k):
    """Token ids at ranks 2..k per row (descending logits, ties to the lower id)."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., 1:k]


def sample_echo(logits, k, rng):
    """One token per position from the renormalised softmax over ranks 2..k.

    Returns ``(tokens, candidates)``; candidates has shape (..., k - 1).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if k < 2:
        raise ValueError("top-K must be >= 2")
    k = min(k, logits.shape[-1])
    cand = rank_candidates(logits, k)
    cl = np.take_along_axis(logits, cand, axis=-1)
    p = np.exp(cl - cl.max(axis=-1, keepdims=True))
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(cl.shape[:-1] + (1,)) * cdf[..., -1:]
    choice = np.minimum((cdf <= u).sum(axis=-1), cand.shape[-1] - 1)
    tokens = np.take_along_axis(cand, choice[..., None], axis=-1)[..., 0]
    return tokens, cand


@dataclass
class EchoBatch:
    tokens: np.ndarray
    candidates: np.ndarray
    masked: np.ndarray
    plans: list = field(default_factory=list)


def make_echoes(logits, k, rng, mask_id, grid, jsm=True, jsm_range=None):
    """Full-length echoes from decoder logits, then JSM per sample."""
    tokens, cand = sample_echo(logits, k, rng)
    if not jsm:
        return EchoBatch(tokens, cand, tokens.copy(), [])
    masked, plans = [], []
    for row in tokens:
        m, plan = jittered_spatial_mask(row, rng, mask_id, grid, jsm_range)
        masked.append(m)
        plans.append(plan)
    return EchoBatch(tokens, cand, np.stack(masked), plans)


def _check_normalized(name, z):
    norms = np.sqrt((np.asarray(z) ** 2).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError(f"contrastive_loss: rows of {name} must be L2-normalised")


def contrastive_loss(z, z_teacher, tau=0.2, uniformity=True, variant="infonce"):
    """InfoNCE between student rows ``z`` and teacher rows, plus the uniformity penalty.

    Teacher rows are treated as constants. ``variant="l2"`` swaps InfoNCE for
    the mean squared distance between matching rows.
    """
    zt = z_teacher.data if isinstance(z_teacher, Tensor) else np.asarray(z_teacher)
    _check_normalized("z", z.data)
    _check_normalized("z_teacher", zt)
    B = z.shape[0]
    zt = Tensor(zt.astype(z.dtype))
    if variant == "infonce":
        sims = ad.mul(ad.matmul(z, ad.transpose(zt, (1, 0))), 1.0 / tau)
        diag = Tensor(np.eye(B, dtype=z.dtype) * (-1.0 / B))
        loss = ad.sum_(ad.mul(ad.log_softmax(sims), diag))
    elif variant == "l2":
        loss = ad.mul(ad.sum_(ad.square(ad.sub(z, zt))), 1.0 / B)
    else:
        raise ValueError(f"unknown contrastive variant {variant!r}")
    if uniformity:
        gram = ad.matmul(z, ad.transpose(z, (1, 0)))
        loss = ad.add(loss, ad.mul(ad.sum_(ad.square(gram)), UNIFORMITY_WEIGHT / B))
    return loss


def combined_loss(recon, cl, lam, warmup=False):
    """Reconstruction alone during echo warmup, otherwise ``recon + lam * cl``."""
    if warmup or cl is None:
        return recon
    return ad.add(recon, ad.mul(cl, float(lam)))
