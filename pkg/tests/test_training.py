import math

import numpy as np
import pytest

from sorcen.autodiff import ParamStore
from sorcen.model import NetworkConfig
from sorcen.objectives import LossConfig
from sorcen.training import (
    METRIC_FIELDS,
    AdamW,
    TrainConfig,
    Trainer,
    clip_grad_norm,
    ema_momentum_at,
    lr_at,
    parse_config_file,
    run_training,
)


def tiny_net(dtype="float64", dropout=0.5):
    return NetworkConfig(vocab=16, seq_len=16, dim=16, enc_depth=1, dec_depth=1, heads=2,
                         mlp_ratio=2, proj_dim=8, dropout=dropout, dtype=dtype, seed=1)


def tiny_data(n=24, seed=0):
    return np.random.default_rng(seed).integers(0, 16, (n, 16))


def test_lr_schedule_examples():
    peak = 1.5e-4 * 4096 / 256
    assert abs(peak - 2.4e-3) < 1e-15
    assert lr_at(0, 1600, 40, peak) == 0.0
    assert lr_at(20, 1600, 40, peak) == pytest.approx(peak / 2, abs=1e-12)
    assert lr_at(40, 1600, 40, peak) == pytest.approx(peak, abs=1e-12)
    assert lr_at(820, 1600, 40, peak) == pytest.approx(peak / 2, abs=1e-12)
    assert lr_at(1600, 1600, 40, peak) == pytest.approx(0.0, abs=1e-12)


def test_lr_schedule_continuous_and_bounded():
    vals = [lr_at(s, 1000, 25, 1.0) for s in range(1001)]
    assert max(vals) <= 1.0 and min(vals) >= 0.0
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) <= 1 / 25 + 1e-12


def test_ema_momentum_schedule():
    assert ema_momentum_at(0, 100) == pytest.approx(0.996)
    assert ema_momentum_at(50, 100) == pytest.approx(0.998)
    assert ema_momentum_at(100, 100) == 1.0


def test_default_warmups():
    cfg = TrainConfig(epochs=1600)
    assert cfg.lr_warmup == 40 and cfg.echo_warmup == 80
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig(epochs=2, warmup_epochs=3)


def test_clip_grad_norm():
    p = ParamStore()
    a = p.add("a", np.zeros(4))
    b = p.add("b", np.zeros(3))
    a.grad = np.full(4, 10.0)
    b.grad = np.full(3, -10.0)
    pre = clip_grad_norm(p, 3.0)
    assert pre == pytest.approx(10 * math.sqrt(7))
    post = math.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert post <= 3.0 + 1e-6
    a.grad = np.full(4, 0.1)
    b.grad = np.zeros(3)
    clip_grad_norm(p, 3.0)
    np.testing.assert_array_equal(a.grad, 0.1)


def test_adamw_first_step_and_decay_exclusions():
    p = ParamStore()
    w = p.add("enc.fc.w", np.ones(3))
    bias = p.add("enc.fc.b", np.ones(3))
    emb = p.add("enc.tok", np.ones(3))
    for t in (w, bias, emb):
        t.grad = np.full(3, 2.0)
    AdamW(p, weight_decay=0.5).step(0.1)
    # the bias-corrected first step moves every weight by lr
    np.testing.assert_allclose(w.data, 1.0 * (1 - 0.05) - 0.1, rtol=1e-7)
    np.testing.assert_allclose(bias.data, 0.9, rtol=1e-7)
    np.testing.assert_allclose(emb.data, 0.9, rtol=1e-7)


def test_step_metrics_and_clipping():
    tr = Trainer(tiny_net(), TrainConfig(epochs=2, batch_size=8, clip_norm=0.5), LossConfig(), 3)
    data = tiny_data()
    for _ in range(4):
        row = tr.train_step(data[:8])
        assert all(math.isfinite(row[k]) for k in ("recon", "contrastive", "total", "grad_norm"))
    grads = math.sqrt(sum(float((t.grad**2).sum()) for t in tr.student.values()))
    assert grads <= 0.5 + 1e-6


def test_training_is_deterministic(tmp_path):
    data = tiny_data()
    cfg = TrainConfig(epochs=2, batch_size=8, base_lr=1e-2)
    for name in "ab":
        run_training(data, tiny_net(), cfg, LossConfig(), tmp_path / f"{name}.sorc")
    a = (tmp_path / "a.metrics.csv").read_bytes()
    assert a == (tmp_path / "b.metrics.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 2 * 3
    assert a.decode().splitlines()[0] == ",".join(METRIC_FIELDS)


def test_partial_last_batch(tmp_path):
    tr = run_training(tiny_data(20), tiny_net(), TrainConfig(epochs=1, batch_size=8),
                      LossConfig(), tmp_path / "p.sorc")
    assert tr.step == 3
    sizes = [len(b) for b in tr.batches_for_epoch(20, 0)]
    assert sizes == [8, 8, 4]


def test_lambda_zero_never_runs_teacher():
    tr = Trainer(tiny_net(), TrainConfig(epochs=2, batch_size=8, echo_warmup_epochs=0), LossConfig(lam=0.0), 3)
    data = tiny_data()
    for _ in range(3):
        row = tr.train_step(data[:8])
        assert row["contrastive"] == 0.0 and row["total"] == row["recon"]
    assert tr.teacher_forwards == 0


def test_no_teacher_forward_during_echo_warmup():
    tr = Trainer(tiny_net(), TrainConfig(epochs=4, batch_size=8, echo_warmup_epochs=2), LossConfig(), 3)
    data = tiny_data()
    for step in range(8):
        tr.train_step(data[:8])
        assert tr.teacher_forwards == max(0, step + 1 - 6)
    assert tr.teacher_forwards == 2


def test_teacher_tracks_ema_shadow_exactly():
    tr = Trainer(tiny_net(), TrainConfig(epochs=50, batch_size=8, base_lr=1e-2), LossConfig(), 1)
    shadow = {n: t.data.copy() for n, t in tr.teacher.items()}
    data = tiny_data()
    for step in range(50):
        tr.train_step(data[(step % 3) * 8 : (step % 3) * 8 + 8])
        m = ema_momentum_at(step, tr.total_steps)
        for n in shadow:
            shadow[n] = m * shadow[n] + (1.0 - m) * tr.student[n].data
    for n, t in tr.teacher.items():
        np.testing.assert_array_equal(t.data, shadow[n])
    assert not any(t.requires_grad or t.grad is not None for t in tr.teacher.values())


def test_resume_reproduces_uninterrupted_run(tmp_path):
    data = tiny_data()
    cfg = TrainConfig(epochs=3, batch_size=8, base_lr=1e-2, echo_warmup_epochs=1)
    run_training(data, tiny_net(), cfg, LossConfig(), tmp_path / "full.sorc")
    run_training(data, tiny_net(), cfg, LossConfig(), tmp_path / "part.sorc", stop_after=4)
    run_training(data, None, None, None, tmp_path / "part.sorc", resume=tmp_path / "part.sorc")
    assert (tmp_path / "full.metrics.csv").read_bytes() == (tmp_path / "part.metrics.csv").read_bytes()
    a, b = Trainer.load(tmp_path / "full.sorc"), Trainer.load(tmp_path / "part.sorc")
    for n in a.student:
        np.testing.assert_array_equal(a.student[n].data, b.student[n].data)


def test_empty_data_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        run_training(np.zeros((0, 16), int), tiny_net(), TrainConfig(), LossConfig(), tmp_path / "x.sorc")


def test_unwritable_log_reports_path(tmp_path):
    with pytest.raises(OSError, match="metrics log"):
        run_training(tiny_data(), tiny_net(), TrainConfig(epochs=1, batch_size=8), LossConfig(),
                     tmp_path / "x.sorc", log_path=tmp_path / "missing" / "log.csv")


def test_parse_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 3\nlam=0.2  # trailing\n\n")
    assert parse_config_file(p) == {"epochs": "3", "lam": "0.2"}
    p.write_text("epochs\n")
    with pytest.raises(ValueError, match=":1:"):
        parse_config_file(p)


def test_long_run_stays_finite():
    net = tiny_net(dtype="float32", dropout=0.1)
    tr = Trainer(net, TrainConfig(epochs=300, batch_size=8, base_lr=5e-2, echo_warmup_epochs=0), LossConfig(lam=1.0), 1)
    data = tiny_data(64)
    for step in range(300):
        row = tr.train_step(data[(step % 8) * 8 : (step % 8) * 8 + 8])
    assert math.isfinite(row["total"])
