"""Frozen-feature evaluation: linear probe, k-NN, few-shot and a token Fréchet distance."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .model import encode, full_input
from .rng import stream


@dataclass
class FeatureMatrix:
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature matrix contains non-finite values")


def extract_features(params, cfg, seqs, batch=256):
    """Mean-pooled student encoder outputs over the full sequence with the extra token."""
    seqs = np.asarray(seqs)
    if seqs.size and seqs.max() >= cfg.vocab:
        raise ValueError(f"token id {int(seqs.max())} outside the model vocabulary {cfg.vocab}")
    out = []
    with ad.no_grad():
        for i in range(0, seqs.shape[0], batch):
            ids, pos = full_input(seqs[i : i + batch], cfg)
            lat = encode(params, cfg, ids, pos, train=False)
            out.append(lat.data.mean(axis=1).astype(np.float64))
    if not out:
        return np.zeros((0, cfg.dim))
    return np.concatenate(out, axis=0)


def file_digest(*paths):
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()


def cached_features(checkpoint_path, dataset_path, cache_dir=None):
    """Features for a dataset under a checkpoint, cached by the content hash of both files."""
    from .model import load_checkpoint
    from .tokens import read_dataset

    key = file_digest(checkpoint_path, dataset_path)
    cache = Path(cache_dir) / f"{key}.npz" if cache_dir else None
    if cache is not None and cache.exists():
        z = np.load(cache)
        return FeatureMatrix(z["features"], z["labels"] if z["labels"].size else None)
    ck = load_checkpoint(checkpoint_path)
    header, ids, labels = read_dataset(dataset_path)
    if header.vocab != ck["config"].vocab:
        raise ValueError(
            f"dataset vocabulary {header.vocab} does not match checkpoint vocabulary {ck['config'].vocab}"
        )
    fm = FeatureMatrix(extract_features(ck["student"], ck["config"], ids), labels)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, features=fm.features, labels=labels if labels is not None else np.zeros(0))
    return fm


# ---------------------------------------------------------------- linear probe


def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def fit_logistic(X, y, n_classes, l2=1e-4, tol=1e-8, max_iter=10000):
    """Multinomial logistic regression by L-BFGS; returns ``(W, b)``."""
    n, d = X.shape
    Y = np.eye(n_classes)[y]

    def f(theta):
        W = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes :]
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        loss = -(Y * logp).sum() / n + 0.5 * l2 * (W * W).sum()
        g = (np.exp(logp) - Y) / n
        gW = X.T @ g + l2 * W
        return loss, np.concatenate([gW.ravel(), g.sum(axis=0)])

    theta0 = np.zeros(d * n_classes + n_classes)
    res = optimize.minimize(
        f, theta0, jac=True, method="L-BFGS-B",
        options={"gtol": tol, "ftol": 1e-15, "maxiter": max_iter, "maxcor": 20},
    )
    W = res.x[: d * n_classes].reshape(d, n_classes)
    return W, res.x[d * n_classes :]


def linear_probe(train_x, train_y, test_x, test_y, l2=1e-4, tol=1e-8, return_train=False):
    """Top-1 accuracy of a logistic-regression probe on frozen features."""
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    n_classes = int(max(train_y.max(), test_y.max() if test_y.size else 0)) + 1
    Xtr, Xte = _standardize(np.asarray(train_x, float), np.asarray(test_x, float))
    W, b = fit_logistic(Xtr, train_y, n_classes, l2, tol)
    acc = float(np.mean(np.argmax(Xte @ W + b, axis=1) == test_y))
    if return_train:
        return acc, float(np.mean(np.argmax(Xtr @ W + b, axis=1) == train_y))
    return acc


# ------------------------------------------------------------------------ k-NN


def _unit(x):
    x = np.asarray(x, float)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_x, train_y, test_x, k=20, batch=512):
    """Cosine k-NN; majority vote, ties go to the class with larger summed similarity."""
    train_y = np.asarray(train_y)
    if k > train_y.size:
        raise ValueError(f"k={k} exceeds the {train_y.size} training samples")
    A = _unit(train_x)
    n_classes = int(train_y.max()) + 1
    preds = []
    for i in range(0, len(test_x), batch):
        sims = _unit(test_x[i : i + batch]) @ A.T
        nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        lab = train_y[nn]
        s = np.take_along_axis(sims, nn, axis=1)
        votes = np.zeros((lab.shape[0], n_classes))
        simsum = np.zeros_like(votes)
        rows = np.arange(lab.shape[0])[:, None]
        np.add.at(votes, (rows, lab), 1)
        np.add.at(simsum, (rows, lab), s)
        best = votes == votes.max(axis=1, keepdims=True)
        preds.append(np.argmax(np.where(best, simsum, -np.inf), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, int)


def knn_eval(train_x, train_y, test_x, test_y, k=20):
    return float(np.mean(knn_predict(train_x, train_y, test_x, k) == np.asarray(test_y)))


# -------------------------------------------------------------------- few-shot


def few_shot_indices(labels, shots, seed):
    labels = np.asarray(labels)
    rng = stream(seed, "fewshot", shots)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if shots > idx.size:
            raise ValueError(f"class {c} has {idx.size} samples, fewer than {shots} shots")
        picked.append(rng.permutation(idx)[:shots])
    return np.sort(np.concatenate(picked))


def few_shot_eval(train_x, train_y, test_x, test_y, shots, seeds=(0, 1, 2, 3, 4), **probe_kw):
    """Mean probe accuracy over seeds, each training on ``shots`` samples per class."""
    train_y = np.asarray(train_y)
    accs = []
    for seed in seeds:
        idx = few_shot_indices(train_y, shots, seed)
        accs.append(linear_probe(train_x[idx], train_y[idx], test_x, test_y, **probe_kw))
    return float(np.mean(accs))


# ------------------------------------------------------------ Fréchet distance


def _sqrt_psd(mat, what, tol=1e-6):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T, np.clip(w, 0, None)


def frechet_distance(mu1, cov1, mu2, cov2):
    """``|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`` via symmetric eigendecompositions."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    s1, _ = _sqrt_psd(cov1, "first covariance")
    _, w = _sqrt_psd(s1 @ cov2 @ s1, "covariance product")
    diff = mu1 - mu2
    return float(max(0.0, diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.sqrt(w).sum()))


def gaussian_stats(features):
    features = np.asarray(features, float)
    return features.mean(axis=0), np.cov(features, rowvar=False)


def token_frechet_distance(params, cfg, real, generated):
    """Fréchet distance between encoder-feature Gaussians of two token sets."""
    P = cfg.dim
    if len(real) < 2 * P or len(generated) < 2 * P:
        raise ValueError(f"need at least {2 * P} sequences per set, got {len(real)} and {len(generated)}")
    fr = extract_features(params, cfg, real)
    fg = extract_features(params, cfg, generated)
    return frechet_distance(*gaussian_stats(fr), *gaussian_stats(fg))
