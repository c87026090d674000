import math

import numpy as np
import pytest
from PIL import Image

from sorcen.generation import (
    DecodeConfig,
    generate,
    inpaint,
    iterative_decode,
    masked_count_at,
    random_visible,
    rect_visible,
    save_token_png,
)
from sorcen.model import NetworkConfig, init_student


@pytest.fixture(scope="module")
def model():
    cfg = NetworkConfig(vocab=12, seq_len=16, dim=16, enc_depth=1, dec_depth=1, heads=2,
                        mlp_ratio=2, proj_dim=8, dtype="float64", seed=2)
    return init_student(cfg), cfg


def test_schedule_examples():
    assert masked_count_at(10, 20, 256) == 181
    assert masked_count_at(20, 20, 256) == 0
    assert masked_count_at(1, 20, 256) == math.floor(256 * math.cos(math.pi / 40))
    assert masked_count_at(1, 1, 256) == 0
    with pytest.raises(ValueError):
        masked_count_at(0, 20, 256)


def test_schedule_monotone_exhaustive():
    for T in range(1, 65):
        for S in list(range(0, 70)) + [255, 256, 257, 1024, 4096]:
            counts = [S] + [masked_count_at(k, T, S) for k in range(1, T + 1)]
            assert all(a >= b for a, b in zip(counts, counts[1:])), (T, S)
            assert counts[-1] == 0


def test_temperature_schedule():
    d = DecodeConfig(steps=10)
    assert d.temperature(1) == 1.0 and d.temperature(10) == pytest.approx(0.1)
    assert DecodeConfig(steps=1).temperature(1) == 1.0


def test_generate_fills_every_position(model):
    p, cfg = model
    trace = []
    init = np.full((5, cfg.seq_len), cfg.mask_id)
    out = iterative_decode(p, cfg, init, DecodeConfig(steps=6), trace=trace)
    assert out.shape == (5, 16) and out.max() < cfg.vocab and out.min() >= 0
    for k, counts in enumerate(trace, 1):
        np.testing.assert_array_equal(counts, masked_count_at(k, 6, 16))


def test_single_step_decode(model):
    p, cfg = model
    out = generate(p, cfg, 3, DecodeConfig(steps=1))
    assert np.all(out < cfg.vocab)


def test_no_masks_is_noop(model):
    p, cfg = model
    seqs = np.random.default_rng(0).integers(0, cfg.vocab, (2, 16))
    np.testing.assert_array_equal(iterative_decode(p, cfg, seqs), seqs)


def test_committed_tokens_never_change(model, monkeypatch):
    import sorcen.generation as gen

    p, cfg = model
    seen = []
    real = gen._decoder_logits

    def spy(params, c, seqs):
        seen.append(seqs.copy())
        return real(params, c, seqs)

    monkeypatch.setattr(gen, "_decoder_logits", spy)
    out = iterative_decode(p, cfg, np.full((4, 16), cfg.mask_id), DecodeConfig(steps=7))
    assert len(seen) == 7
    for k, before in enumerate(seen):
        committed = before != cfg.mask_id
        for later in seen[k + 1 :] + [out]:
            np.testing.assert_array_equal(later[committed], before[committed])


def test_decoding_is_deterministic(model):
    p, cfg = model
    a = generate(p, cfg, 4, DecodeConfig(steps=7))
    np.testing.assert_array_equal(a, generate(p, cfg, 4, DecodeConfig(steps=7)))


def test_inpaint_preserves_visible(model):
    p, cfg = model
    rng = np.random.default_rng(3)
    seqs = rng.integers(0, cfg.vocab, (6, 16))
    vis = rect_visible(4, 1, 1, 2, 2)
    out = inpaint(p, cfg, seqs, vis)
    np.testing.assert_array_equal(out[:, vis], seqs[:, vis])
    assert np.all(out < cfg.vocab)
    vis = np.stack([random_visible(16, 0.75, rng) for _ in range(6)])
    assert np.all(vis.sum(1) == 4)
    trace = []
    out = iterative_decode(p, cfg, np.where(vis, seqs, cfg.mask_id), DecodeConfig(steps=5), trace=trace)
    np.testing.assert_array_equal(out[vis], seqs[vis])
    for k, counts in enumerate(trace, 1):
        np.testing.assert_array_equal(counts, masked_count_at(k, 5, 12))


def test_inpaint_empty_visible_is_generation(model):
    p, cfg = model
    seqs = np.zeros((2, 16), int)
    a = inpaint(p, cfg, seqs, np.zeros(16, bool))
    b = generate(p, cfg, 2)
    np.testing.assert_array_equal(a, b)


def test_decode_rejects_wrong_length(model):
    p, cfg = model
    with pytest.raises(ValueError, match="seq_len"):
        iterative_decode(p, cfg, np.zeros((1, 9), int))


def test_different_seeds_differ(model):
    p, cfg = model
    a = generate(p, cfg, 4, DecodeConfig(seed=0))
    b = generate(p, cfg, 4, DecodeConfig(seed=1))
    assert not np.array_equal(a, b)


def test_png_export(tmp_path, model):
    _, cfg = model
    seqs = np.random.default_rng(4).integers(0, cfg.vocab, (10, 16))
    seqs[0, 0] = cfg.mask_id
    path = tmp_path / "g.png"
    save_token_png(path, seqs, cfg.vocab, scale=2, per_row=4)
    img = Image.open(path)
    assert img.size == (4 * 9, 3 * 9)
    assert tuple(np.asarray(img)[0, 0]) == (128, 128, 128)
