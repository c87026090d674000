import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sorcen import autodiff as ad
from sorcen.autodiff import Tensor, grad_check
from sorcen.objectives import (
    LossConfig,
    combined_loss,
    contrastive_loss,
    make_echoes,
    rank_candidates,
    recon_loss,
    sample_echo,
)


def unit_rows(rng, B, d):
    z = rng.normal(size=(B, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_uniform_logits_give_log_vocab():
    V = 1024
    logits = Tensor(np.zeros((2, 8, V)))
    targets = np.random.default_rng(0).integers(0, V, (2, 8))
    mask = np.ones((2, 8), bool)
    assert abs(recon_loss(logits, targets, mask).data - np.log(V)) < 1e-9


def test_confident_one_hot_loss():
    V = 10
    targets = np.array([[1, 2, 3]])
    logits = np.full((1, 3, V), -30.0)
    np.put_along_axis(logits, targets[..., None], 30.0, axis=-1)
    mask = np.ones((1, 3), bool)
    assert recon_loss(Tensor(logits), targets, mask, smoothing=0.0).data < 1e-9
    # with smoothing the loss is dominated by the off-target mass, 0.1 * (V-1)/V * 60
    smoothed = recon_loss(Tensor(logits), targets, mask, smoothing=0.1).data
    assert abs(smoothed - 0.1 * (V - 1) / V * 60) < 1e-6


def test_unmasked_positions_do_not_matter():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 6, 7))
    targets = rng.integers(0, 7, (2, 6))
    mask = rng.random((2, 6)) < 0.5
    mask[0, 0] = True
    a = recon_loss(Tensor(logits), targets, mask).data
    logits2 = logits.copy()
    logits2[~mask] = rng.normal(size=(int((~mask).sum()), 7)) * 50
    targets2 = targets.copy()
    targets2[~mask] = 0
    assert recon_loss(Tensor(logits2), targets2, mask).data == a


def test_recon_loss_rejects_empty_mask():
    with pytest.raises(ValueError, match="no masked"):
        recon_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_recon_loss_gradient():
    rng = np.random.default_rng(2)
    targets = rng.integers(0, 5, (2, 4))
    mask = rng.random((2, 4)) < 0.6
    mask[0, 0] = True
    assert grad_check(lambda x: recon_loss(x, targets, mask), rng.normal(size=(2, 4, 5))) < 1e-5


def test_rank_candidates_ties_go_to_lower_id():
    logits = np.array([1.0, 3.0, 3.0, 2.0, 2.0])
    np.testing.assert_array_equal(rank_candidates(logits, 4), [2, 3, 4])


def test_echo_forced_choice_and_never_argmax():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(500, 30))
    top = logits.argmax(-1)
    second = rank_candidates(logits, 2)[:, 0]
    tok, _ = sample_echo(logits, 2, rng)
    np.testing.assert_array_equal(tok, second)
    for k in (5, 15, 30):
        tok, cand = sample_echo(logits, k, rng)
        assert np.all(tok != top)
        assert np.all((cand == tok[:, None]).any(-1))


def test_echo_analytic_frequencies():
    n = 200_000
    logits = np.tile([3.0, np.log(2.0), 0.0, -5.0], (n, 1))
    tok, _ = sample_echo(logits, 3, np.random.default_rng(4))
    f1 = np.mean(tok == 1)
    sd = np.sqrt((2 / 3) * (1 / 3) / n)
    assert abs(f1 - 2 / 3) < 3 * sd
    assert set(np.unique(tok)) == {1, 2}


def test_echo_k_larger_than_vocab_clamps():
    tok, cand = sample_echo(np.array([[0.0, 1.0, 2.0]]), 15, np.random.default_rng(0))
    assert cand.shape == (1, 2) and tok[0] in (0, 1)


def test_make_echoes_with_and_without_jsm():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 16, 9))
    eb = make_echoes(logits, 5, rng, mask_id=9, grid=4, jsm=False)
    np.testing.assert_array_equal(eb.masked, eb.tokens)
    eb = make_echoes(logits, 5, rng, mask_id=9, grid=4, jsm=True)
    for row, tok, plan in zip(eb.masked, eb.tokens, eb.plans):
        vis = row != 9
        assert vis.sum() == plan.size**2
        np.testing.assert_array_equal(row[vis], tok[vis])


def test_contrastive_single_pair():
    z = unit_rows(np.random.default_rng(6), 1, 8)
    assert abs(contrastive_loss(Tensor(z), z).data - 0.1) < 1e-12


@pytest.mark.parametrize("tau", [1.0, 0.2])
def test_contrastive_orthogonal_pairs(tau):
    z = np.eye(2, 4)
    expected = np.log1p(np.exp(-1.0 / tau)) + 0.1
    assert abs(contrastive_loss(Tensor(z), z, tau=tau).data - expected) < 1e-12


def test_contrastive_without_uniformity_and_l2_variant():
    rng = np.random.default_rng(7)
    z, zt = unit_rows(rng, 5, 6), unit_rows(rng, 5, 6)
    sims = z @ zt.T / 0.2
    sims -= sims.max(1, keepdims=True)
    ref = -np.mean(np.diag(sims) - np.log(np.exp(sims).sum(1)))
    assert abs(contrastive_loss(Tensor(z), zt, uniformity=False).data - ref) < 1e-12
    l2 = contrastive_loss(Tensor(z), zt, uniformity=False, variant="l2").data
    assert abs(l2 - np.mean(((z - zt) ** 2).sum(1))) < 1e-12
    assert contrastive_loss(Tensor(z), z, uniformity=False, variant="l2").data == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), B=st.integers(1, 12))
def test_contrastive_permutation_invariant(seed, B):
    rng = np.random.default_rng(seed)
    z, zt = unit_rows(rng, B, 5), unit_rows(rng, B, 5)
    perm = rng.permutation(B)
    a = contrastive_loss(Tensor(z), zt).data
    b = contrastive_loss(Tensor(z[perm]), zt[perm]).data
    assert abs(a - b) < 1e-10


def test_contrastive_rejects_unnormalised():
    z = np.ones((2, 3))
    with pytest.raises(ValueError, match="normalised"):
        contrastive_loss(Tensor(z), z)


def test_contrastive_gradient_ignores_teacher():
    rng = np.random.default_rng(8)
    zt = unit_rows(rng, 4, 6)

    def f(x):
        return contrastive_loss(ad.l2_normalize(x), zt)

    assert grad_check(f, rng.normal(size=(4, 6))) < 1e-5
    teacher = Tensor(zt, requires_grad=True)
    x = Tensor(unit_rows(rng, 4, 6), requires_grad=True)
    loss = contrastive_loss(ad.l2_normalize(x), teacher)
    assert teacher not in ad.reachable_leaves(loss)


def test_combined_loss_arithmetic_and_linearity():
    r, c = Tensor(np.array(2.0)), Tensor(np.array(3.0))
    assert combined_loss(r, c, 0.1).data == pytest.approx(2.3, abs=1e-15)
    assert combined_loss(r, c, 0.0).data == 2.0
    assert combined_loss(r, c, 0.5, warmup=True).data == 2.0
    assert combined_loss(r, None, 0.5).data == 2.0
    vals = [combined_loss(r, c, lam).data for lam in (0.0, 0.1, 0.2, 0.3)]
    assert np.allclose(np.diff(vals), 0.3)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
    with pytest.raises(ValueError):
        LossConfig(top_k=1)
    with pytest.raises(ValueError):
        LossConfig(variant="cosine")
