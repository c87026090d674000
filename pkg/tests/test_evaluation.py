import numpy as np
import pytest
from scipy import linalg

from sorcen.evaluation import (
    FeatureMatrix,
    cached_features,
    extract_features,
    few_shot_eval,
    few_shot_indices,
    frechet_distance,
    gaussian_stats,
    knn_eval,
    knn_predict,
    linear_probe,
    token_frechet_distance,
)
from sorcen.model import NetworkConfig, init_student, init_teacher, save_checkpoint
from sorcen.tokens import SyntheticSpec, generate_synthetic, write_dataset


def gaussians(rng, n, d=8, sep=10.0, classes=2):
    y = rng.integers(0, classes, n)
    centers = rng.normal(size=(classes, d)) * sep
    return centers[y] + rng.normal(size=(n, d)), y


def test_probe_separable_gaussians():
    rng = np.random.default_rng(0)
    X, y = gaussians(rng, 600)
    assert linear_probe(X[:400], y[:400], X[400:], y[400:]) >= 0.99


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3000, 4))
    y = rng.integers(0, 2, 3000)
    acc = linear_probe(X[:1000], y[:1000], X[1000:], y[1000:])
    assert abs(acc - 0.5) < 3 * np.sqrt(0.25 / 2000)


def test_probe_train_at_least_test():
    rng = np.random.default_rng(2)
    # many features, few samples: the probe fits the training set
    X, y = gaussians(rng, 600, d=40, sep=0.3, classes=3)
    test, train = linear_probe(X[:80], y[:80], X[80:], y[80:], return_train=True)
    assert train >= test and train > 0.95


def test_probe_needs_two_classes():
    with pytest.raises(ValueError, match="two classes"):
        linear_probe(np.ones((3, 2)), [0, 0, 0], np.ones((1, 2)), [0])


def test_knn_self_neighbour_and_one_hot():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 6))
    y = rng.integers(0, 4, 50)
    assert knn_eval(X, y, X, y, k=1) == 1.0
    onehot = np.eye(5)[np.arange(40) % 5]
    assert knn_eval(onehot, np.arange(40) % 5, onehot, np.arange(40) % 5, k=8) == 1.0


def test_knn_matches_brute_force():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(500, 5))
    y = rng.integers(0, 3, 500)
    Q = rng.normal(size=(100, 5))
    pred = knn_predict(X, y, Q, k=20)
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    for q, p in zip(Q, pred):
        sims = Xn @ (q / np.linalg.norm(q))
        nn = sorted(range(500), key=lambda i: (-sims[i], i))[:20]
        votes = np.bincount(y[nn], minlength=3)
        sums = np.bincount(y[nn], weights=sims[nn], minlength=3)
        best = [c for c in range(3) if votes[c] == votes.max()]
        assert p == max(best, key=lambda c: sums[c])


def test_knn_k_too_large():
    with pytest.raises(ValueError, match="exceeds"):
        knn_predict(np.ones((3, 2)), [0, 1, 0], np.ones((1, 2)), k=5)


def test_few_shot_indices():
    labels = np.repeat(np.arange(4), 10)
    idx = few_shot_indices(labels, 3, seed=0)
    assert np.all(np.bincount(labels[idx]) == 3)
    np.testing.assert_array_equal(idx, few_shot_indices(labels, 3, seed=0))
    np.testing.assert_array_equal(few_shot_indices(labels, 10, seed=5), np.arange(40))
    with pytest.raises(ValueError, match="fewer"):
        few_shot_indices(labels, 11, seed=0)


def test_few_shot_full_equals_probe_and_monotone():
    rng = np.random.default_rng(5)
    X, y = gaussians(rng, 800, sep=0.6, classes=4)
    train = np.concatenate([np.flatnonzero(y[:400] == c)[:60] for c in range(4)])
    Xtr, ytr = X[train], y[train]
    full = linear_probe(Xtr, ytr, X[400:], y[400:])
    assert few_shot_eval(Xtr, ytr, X[400:], y[400:], 60) == pytest.approx(full)
    accs = [few_shot_eval(Xtr, ytr, X[400:], y[400:], s) for s in (1, 5, 60)]
    assert accs[0] <= accs[1] + 0.02 and accs[1] <= accs[2] + 0.02


def test_one_shot_clean_prototypes():
    spec = SyntheticSpec(classes=6, grid=4, vocab=32, rho=0.0, seed=3)
    X, y = generate_synthetic(spec, 120, split=0)
    Xt, yt = generate_synthetic(spec, 120, split=1)
    onehot = lambda ids: np.eye(32)[ids].reshape(len(ids), -1)
    assert few_shot_eval(onehot(X), y, onehot(Xt), yt, 1) == 1.0


def test_frechet_identities():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(6, 6))
    C = A @ A.T
    mu = rng.normal(size=6)
    assert frechet_distance(mu, C, mu, C) == pytest.approx(0.0, abs=1e-9)
    assert frechet_distance(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    # 1-D closed form (mu1 - mu2)^2 + (s1 - s2)^2
    assert frechet_distance(0.5, 4.0, -1.0, 9.0) == pytest.approx(1.5**2 + 1.0, abs=1e-12)
    B = rng.normal(size=(6, 6))
    D = B @ B.T
    mu2 = rng.normal(size=6)
    assert frechet_distance(mu, C, mu2, D) == pytest.approx(frechet_distance(mu2, D, mu, C), rel=1e-9)
    # against scipy's general matrix square root
    ref = np.sum((mu - mu2) ** 2) + np.trace(C + D - 2 * linalg.sqrtm(C @ D).real)
    assert frechet_distance(mu, C, mu2, D) == pytest.approx(ref, rel=1e-7)


def test_frechet_rejects_indefinite():
    with pytest.raises(ValueError, match="positive semi-definite"):
        frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))


def test_feature_matrix_rejects_nan():
    with pytest.raises(ValueError, match="non-finite"):
        FeatureMatrix(np.array([[np.nan]]))


@pytest.fixture(scope="module")
def small_model():
    cfg = NetworkConfig(vocab=16, seq_len=16, dim=8, enc_depth=1, dec_depth=1, heads=2,
                        mlp_ratio=2, proj_dim=8, dtype="float64", seed=4)
    return init_student(cfg), cfg


def test_random_features_beat_chance(small_model):
    p, cfg = small_model
    spec = SyntheticSpec(classes=4, grid=4, vocab=16, rho=0.2, seed=7)
    X, y = generate_synthetic(spec, 400, 0)
    Xt, yt = generate_synthetic(spec, 400, 1)
    acc = linear_probe(extract_features(p, cfg, X), y, extract_features(p, cfg, Xt), yt)
    assert acc > 0.25 + 3 * np.sqrt(0.25 * 0.75 / 400)


def test_features_batch_independent(small_model):
    p, cfg = small_model
    X = np.random.default_rng(8).integers(0, 16, (10, 16))
    np.testing.assert_allclose(extract_features(p, cfg, X, batch=3), extract_features(p, cfg, X), atol=1e-12)
    with pytest.raises(ValueError, match="vocabulary"):
        extract_features(p, cfg, X + 16)


def test_token_frechet(small_model):
    p, cfg = small_model
    rng = np.random.default_rng(9)
    X = rng.integers(0, 16, (40, 16))
    assert token_frechet_distance(p, cfg, X, X) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError, match="at least 16"):
        token_frechet_distance(p, cfg, X[:10], X)
    mu, cov = gaussian_stats(extract_features(p, cfg, X))
    assert cov.shape == (8, 8)


def test_cached_features(tmp_path, small_model):
    p, cfg = small_model
    ck = tmp_path / "m.sorc"
    save_checkpoint(ck, cfg, p, init_teacher(p))
    X = np.random.default_rng(10).integers(0, 16, (12, 16))
    data = tmp_path / "d.stok"
    write_dataset(data, X, 16, np.arange(12) % 2)
    a = cached_features(ck, data, tmp_path / "cache")
    assert len(list((tmp_path / "cache").iterdir())) == 1
    b = cached_features(ck, data, tmp_path / "cache")
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(b.labels, np.arange(12) % 2)
