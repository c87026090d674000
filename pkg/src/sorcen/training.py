"""Pre-training loop: AdamW, cosine schedules, EMA teacher, clipping, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .masking import mask_and_drop
from .model import (
    NetworkConfig,
    assemble_decoder_input,
    decode_logits,
    encode,
    ema_update,
    full_input,
    init_student,
    init_teacher,
    load_checkpoint,
    pool_project_predict,
    save_checkpoint,
)
from .objectives import LossConfig, combined_loss, contrastive_loss, make_echoes, recon_loss
from .rng import stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "epoch", "lr", "recon", "contrastive", "total", "grad_norm", "ema_momentum"]
STAGES = ["mask", "encode", "decode", "echo", "teacher", "backward", "update"]


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1.5e-4
    lr_scale_batch: int = 256  # peak lr = base_lr * batch_size / lr_scale_batch
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_epochs: float | None = None  # None: 2.5% of epochs (40 of 1600)
    echo_warmup_epochs: float | None = None  # None: 5% of epochs
    clip_norm: float = 3.0
    ema_start: float = 0.996
    ema_end: float = 1.0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_warmup > self.epochs or self.echo_warmup > self.epochs:
            raise ValueError("warmup epochs cannot exceed training epochs")

    @property
    def peak_lr(self):
        return self.base_lr * self.batch_size / self.lr_scale_batch

    @property
    def lr_warmup(self):
        return 0.025 * self.epochs if self.warmup_epochs is None else self.warmup_epochs

    @property
    def echo_warmup(self):
        return 0.05 * self.epochs if self.echo_warmup_epochs is None else self.echo_warmup_epochs


def lr_at(step, total_steps, warmup_steps, peak):
    """Linear warmup to ``peak`` then half-cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    t = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


def ema_momentum_at(step, total_steps, start=0.996, end=1.0):
    t = min(1.0, step / max(1, total_steps))
    return end - (end - start) * 0.5 * (1.0 + math.cos(math.pi * t))


def _decays(name):
    return not (name.endswith(".b") or name.endswith(".g") or name in ("enc.tok", "enc.pos", "dec.pos"))


class AdamW:
    """Adam with decoupled weight decay (no decay on biases, norms, embeddings)."""

    def __init__(self, params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.05):
        self.params = params
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and _decays(name):
                p.data *= 1.0 - lr * self.wd
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    """Scale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for t in params.values() if t.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


class Trainer:
    def __init__(self, net_cfg, train_cfg, loss_cfg, steps_per_epoch, student=None, teacher=None):
        self.net = net_cfg
        self.cfg = train_cfg
        self.loss = loss_cfg
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = steps_per_epoch * train_cfg.epochs
        self.warmup_steps = int(round(train_cfg.lr_warmup * steps_per_epoch))
        self.echo_warmup_steps = int(round(train_cfg.echo_warmup * steps_per_epoch))
        self.student = student if student is not None else init_student(net_cfg)
        self.teacher = teacher if teacher is not None else init_teacher(self.student)
        self.opt = AdamW(self.student, train_cfg.beta1, train_cfg.beta2, train_cfg.eps, train_cfg.weight_decay)
        self.step = 0
        self.teacher_forwards = 0
        self.timings = {k: 0.0 for k in STAGES}

    @contextmanager
    def _timed(self, stage):
        t0 = time.perf_counter()
        yield
        self.timings[stage] += time.perf_counter() - t0

    def echo_active(self, step=None):
        step = self.step if step is None else step
        return self.loss.echo and self.loss.lam > 0 and step >= self.echo_warmup_steps

    def forward(self, batch, rng):
        """Build the loss graph for one batch; returns ``(total, recon, contrastive or None)``."""
        net, lc = self.net, self.loss
        with self._timed("mask"):
            out = [mask_and_drop(seq, rng, net.mask_id, net.extra_id) for seq in batch]
            ids = np.stack([o[0] for o in out])
            pos = np.stack([o[1] for o in out])
            plans = [o[2] for o in out]
            mask = np.stack([p.mask for p in plans])

        with self._timed("encode"):
            latents = encode(self.student, net, ids, pos, train=True, rng=rng)
        with self._timed("decode"):
            s = assemble_decoder_input(latents, plans)
            logits = decode_logits(self.student, net, s, train=True, rng=rng)
            rec = recon_loss(logits, batch, mask, lc.label_smoothing)

        cl = None
        if self.echo_active():
            with self._timed("echo"):
                echoes = make_echoes(logits.data, lc.top_k, rng, net.mask_id, net.grid, lc.jsm, lc.jsm_range)
            with self._timed("teacher"):
                with ad.no_grad():
                    t_ids, t_pos = full_input(echoes.masked, net)
                    t_lat = encode(self.teacher, net, t_ids, t_pos, train=False)
                    z_t = pool_project_predict(self.teacher, net, t_lat, "teacher")
                self.teacher_forwards += 1
            with self._timed("echo"):
                z = pool_project_predict(self.student, net, latents, "student", predictor=lc.predictor)
                cl = contrastive_loss(z, z_t, lc.tau, lc.uniformity, lc.variant)

        return combined_loss(rec, cl, lc.lam, warmup=cl is None), rec, cl

    def train_step(self, batch):
        """One optimisation step on an (B, S) array of token ids."""
        batch = np.asarray(batch)
        rng = stream(self.cfg.seed, "step", self.step)
        total, rec, cl = self.forward(batch, rng)
        values = {
            "recon": float(rec.data),
            "contrastive": float(cl.data) if cl is not None else 0.0,
            "total": float(total.data),
        }
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLoss(f"non-finite loss at step {self.step}: {values}")

        with self._timed("backward"):
            ad.backward(total, self.student)
            gnorm = clip_grad_norm(self.student, self.cfg.clip_norm)
        lr = lr_at(self.step, self.total_steps, self.warmup_steps, self.cfg.peak_lr)
        mom = ema_momentum_at(self.step, self.total_steps, self.cfg.ema_start, self.cfg.ema_end)
        with self._timed("update"):
            self.opt.step(lr)
            ema_update(self.student, self.teacher, mom)

        values.update(step=self.step, lr=lr, grad_norm=gnorm, ema_momentum=mom,
                      epoch=self.step // self.steps_per_epoch)
        self.step += 1
        return values

    def batches_for_epoch(self, n, epoch):
        perm = stream(self.cfg.seed, "epoch", epoch).permutation(n)
        B = self.cfg.batch_size
        return [perm[i : i + B] for i in range(0, n, B)]

    # ------------------------------------------------------------- persistence

    def save(self, path):
        extras = {
            "step": self.step,
            "steps_per_epoch": self.steps_per_epoch,
            "optimizer_t": self.opt.t,
            "train_config": asdict(self.cfg),
            "loss_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.loss).items()},
        }
        save_checkpoint(path, self.net, self.student, self.teacher, self.opt.m, self.opt.v, extras)

    @classmethod
    def load(cls, path):
        ck = load_checkpoint(path)
        ex = ck["extras"]
        tcfg = _from_dict(TrainConfig, ex["train_config"])
        lraw = dict(ex["loss_config"])
        if lraw.get("jsm_range") is not None:
            lraw["jsm_range"] = tuple(lraw["jsm_range"])
        lcfg = _from_dict(LossConfig, lraw)
        tr = cls(ck["config"], tcfg, lcfg, ex["steps_per_epoch"], ck["student"], ck["teacher"])
        if ck["opt_m"]:
            tr.opt.m = ck["opt_m"]
            tr.opt.v = ck["opt_v"]
        tr.opt.t = ex["optimizer_t"]
        tr.step = ex["step"]
        return tr


def _from_dict(cls, raw):
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in raw.items() if k in known})


def run_training(data, net_cfg, train_cfg, loss_cfg, out_path, log_path=None, resume=None, stop_after=None):
    """Train on an (n, S) id array; returns the trainer.

    Metrics go to ``log_path`` (CSV, one line per step after a header);
    wall-clock time per step goes to a ``.timing.csv`` sidecar so the main
    log stays byte-reproducible. ``resume`` continues from a checkpoint,
    appending to the existing log. ``stop_after`` ends the run early after
    that many global steps (used for resumption tests).
    """
    data = np.asarray(data)
    if data.shape[0] == 0:
        raise ValueError("training data is empty")
    n = data.shape[0]
    if resume is not None:
        # configs come from the checkpoint; the ones passed in are ignored
        trainer = Trainer.load(resume)
        steps_per_epoch = math.ceil(n / trainer.cfg.batch_size)
        if trainer.steps_per_epoch != steps_per_epoch:
            raise ValueError(f"{resume}: checkpoint expects {trainer.steps_per_epoch} steps per epoch")
    else:
        steps_per_epoch = math.ceil(n / train_cfg.batch_size)
        trainer = Trainer(net_cfg, train_cfg, loss_cfg, steps_per_epoch)

    out_path = Path(out_path)
    log_path = Path(log_path) if log_path is not None else out_path.with_suffix(".metrics.csv")
    timing_path = log_path.with_suffix(".timing.csv")
    mode = "a" if resume is not None else "w"
    try:
        logf = open(log_path, mode, newline="")
        timef = open(timing_path, mode, newline="")
    except OSError as e:
        raise OSError(f"cannot open metrics log {log_path}: {e}") from e

    with logf, timef:
        writer = csv.writer(logf, lineterminator="\n")
        twriter = csv.writer(timef, lineterminator="\n")
        if mode == "w":
            writer.writerow(METRIC_FIELDS)
            twriter.writerow(["step", "wall_time"])
        t0 = time.perf_counter()
        first_epoch = trainer.step // steps_per_epoch
        for epoch in range(first_epoch, trainer.cfg.epochs):
            batches = trainer.batches_for_epoch(n, epoch)
            for idx in batches[trainer.step - epoch * steps_per_epoch :]:
                if stop_after is not None and trainer.step >= stop_after:
                    trainer.save(out_path)
                    return trainer
                row = trainer.train_step(data[idx])
                writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
                twriter.writerow([row["step"], f"{time.perf_counter() - t0:.6f}"])
                every = trainer.cfg.checkpoint_every
                if every and trainer.step % every == 0:
                    trainer.save(out_path)
            log.info("epoch %d done, step %d", epoch, trainer.step)
    trainer.save(out_path)
    return trainer


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_file(path):
    """Flat ``key=value`` text; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
