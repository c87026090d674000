"""Token transformer: student encoder, decoder, projector/predictor heads and the EMA teacher."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .masking import MaskPlan
from .rng import stream


@dataclass
class NetworkConfig:
    vocab: int = 1024
    seq_len: int = 256
    dim: int = 128
    enc_depth: int = 4
    dec_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    proj_dim: int = 512
    proj_depth: int = 2
    pred_depth: int = 2
    dropout: float = 0.5
    dropout_in: str = "decoder"  # one of decoder, all, none
    predictor: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.dropout_in not in ("decoder", "all", "none"):
            raise ValueError(f"dropout_in must be decoder, all or none, got {self.dropout_in!r}")
        if self.proj_depth < 1 or self.pred_depth < 1:
            raise ValueError("projector and predictor need at least one layer")

    @property
    def mask_id(self):
        return self.vocab

    @property
    def extra_id(self):
        return self.vocab + 1

    @property
    def grid(self):
        return int(round(math.sqrt(self.seq_len)))

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


# ------------------------------------------------------------------ parameters


def _linear_params(store, name, n_in, n_out, rng, dtype):
    limit = math.sqrt(6.0 / (n_in + n_out))
    store.add(f"{name}.w", rng.uniform(-limit, limit, (n_in, n_out)), dtype)
    store.add(f"{name}.b", np.zeros(n_out), dtype)


def _ln_params(store, name, d, dtype):
    store.add(f"{name}.g", np.ones(d), dtype)
    store.add(f"{name}.b", np.zeros(d), dtype)


def _block_params(store, name, cfg, rng, dtype):
    d, h = cfg.dim, cfg.dim * cfg.mlp_ratio
    _ln_params(store, f"{name}.ln1", d, dtype)
    _linear_params(store, f"{name}.qkv", d, 3 * d, rng, dtype)
    _linear_params(store, f"{name}.out", d, d, rng, dtype)
    _ln_params(store, f"{name}.ln2", d, dtype)
    _linear_params(store, f"{name}.fc1", d, h, rng, dtype)
    _linear_params(store, f"{name}.fc2", h, d, rng, dtype)


def _mlp_params(store, name, n_in, width, depth, rng, dtype):
    for i in range(depth):
        _linear_params(store, f"{name}.{i}", n_in if i == 0 else width, width, rng, dtype)


def init_student(cfg, dtype=None):
    """Encoder + projector + predictor + decoder, initialised from ``cfg.seed``."""
    dtype = np.dtype(dtype or cfg.dtype)
    rng = stream(cfg.seed, "init")
    p = ParamStore()
    d = cfg.dim
    p.add("enc.tok", rng.normal(0, 0.02, (cfg.vocab + 2, d)), dtype)
    p.add("enc.pos", rng.normal(0, 0.02, (cfg.seq_len + 1, d)), dtype)
    for i in range(cfg.enc_depth):
        _block_params(p, f"enc.blocks.{i}", cfg, rng, dtype)
    _ln_params(p, "enc.ln", d, dtype)
    _mlp_params(p, "proj", d, cfg.proj_dim, cfg.proj_depth, rng, dtype)
    _mlp_params(p, "pred", cfg.proj_dim, cfg.proj_dim, cfg.pred_depth, rng, dtype)
    p.add("dec.pos", rng.normal(0, 0.02, (cfg.seq_len + 1, d)), dtype)
    for i in range(cfg.dec_depth):
        _block_params(p, f"dec.blocks.{i}", cfg, rng, dtype)
    _ln_params(p, "dec.ln", d, dtype)
    _linear_params(p, "dec.head", d, cfg.vocab, rng, dtype)
    return p


def teacher_names(student):
    return [n for n in student if n.startswith(("enc.", "proj."))]


def init_teacher(student):
    """Frozen copy of the student encoder and projector (no predictor)."""
    t = ParamStore()
    for name in teacher_names(student):
        t[name] = Tensor(student[name].data.copy(), requires_grad=False, name=name)
    return t


def ema_update(student, teacher, momentum):
    """``teacher <- m * teacher + (1 - m) * student`` over the teacher's parameters."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    missing = [n for n in teacher if n not in student]
    if missing or set(teacher) != set(teacher_names(student)):
        raise KeyError(f"teacher/student parameter names differ: {missing[:3]}")
    m = momentum
    for name, t in teacher.items():
        s = student[name].data
        if s.shape != t.data.shape:
            raise ValueError(f"{name}: shape {s.shape} vs {t.data.shape}")
        t.data = (m * t.data + (1.0 - m) * s).astype(t.data.dtype)
    return teacher


# --------------------------------------------------------------------- forward


def _block(p, name, x, cfg, train, rng, drop):
    B, T, d = x.shape
    H = cfg.heads
    dh = d // H
    h = ad.layer_norm(x, p[f"{name}.ln1.g"], p[f"{name}.ln1.b"])
    qkv = ad.linear(h, p[f"{name}.qkv.w"], p[f"{name}.qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ad.reshape(ad.slice_axis(qkv, i, i + 1, 0), (B, H, T, dh)) for i in range(3))
    a = ad.attention(q, k, v)
    a = ad.reshape(ad.transpose(a, (0, 2, 1, 3)), (B, T, d))
    a = ad.linear(a, p[f"{name}.out.w"], p[f"{name}.out.b"])
    x = ad.add(x, ad.dropout(a, drop, rng, train))
    h = ad.layer_norm(x, p[f"{name}.ln2.g"], p[f"{name}.ln2.b"])
    h = ad.gelu(ad.linear(h, p[f"{name}.fc1.w"], p[f"{name}.fc1.b"]))
    h = ad.linear(h, p[f"{name}.fc2.w"], p[f"{name}.fc2.b"])
    return ad.add(x, ad.dropout(h, drop, rng, train))


def _drop_rate(cfg, part):
    if cfg.dropout_in == "all" or cfg.dropout_in == part:
        return cfg.dropout
    return 0.0


def encode(p, cfg, ids, pos, train=False, rng=None):
    """Encoder latents for token ids (B, T) at positional indices ``pos`` (B, T).

    Position 0 belongs to the extra token; grid index ``i`` uses ``i + 1``.
    """
    ids = np.asarray(ids)
    pos = np.asarray(pos)
    if ids.ndim != 2 or ids.shape != pos.shape:
        raise ValueError(f"encode: ids {ids.shape} and positions {pos.shape} must be equal 2-D shapes")
    if ids.shape[1] > cfg.seq_len + 1:
        raise ValueError(f"encode: input length {ids.shape[1]} exceeds {cfg.seq_len + 1}")
    if ids.max() >= cfg.vocab + 2 or ids.min() < 0:
        raise ValueError(f"encode: token ids must lie in [0, {cfg.vocab + 2})")
    drop = _drop_rate(cfg, "encoder")
    x = ad.add(ad.embedding(p["enc.tok"], ids), ad.embedding(p["enc.pos"], pos))
    for i in range(cfg.enc_depth):
        x = _block(p, f"enc.blocks.{i}", x, cfg, train, rng, drop)
    return ad.layer_norm(x, p["enc.ln.g"], p["enc.ln.b"])


def full_input(seqs, cfg):
    """Extra token + the whole sequence, with matching positional indices."""
    seqs = np.asarray(seqs)
    B, S = seqs.shape
    if S != cfg.seq_len:
        raise ValueError(f"sequence length {S} does not match model seq_len {cfg.seq_len}")
    ids = np.concatenate([np.full((B, 1), cfg.extra_id), seqs], axis=1)
    pos = np.broadcast_to(np.arange(S + 1), (B, S + 1))
    return ids, pos


def full_plan(seq, mask_id):
    """Plan for an undropped sequence: every position retained, M tokens masked."""
    seq = np.asarray(seq)
    return MaskPlan(float(np.mean(seq == mask_id)), seq == mask_id, np.arange(seq.size))


def assembly_index(plan):
    """Index into the encoder output for each decoder slot 0..S."""
    S = plan.seq_len
    idx = np.zeros(S + 1, dtype=np.int64)
    slot = np.zeros(S, dtype=np.int64)
    slot[plan.retained] = np.arange(1, plan.retained.size + 1)
    vis = ~plan.mask
    idx[1:][vis] = slot[vis]
    return idx


def assemble_decoder_input(latents, plans):
    """Decoder sequence s: e_0 at slot 0 and at every masked/dropped slot, e_i elsewhere."""
    B, T, _ = latents.shape
    if len(plans) != B:
        raise ValueError(f"{len(plans)} plans for a batch of {B}")
    idx = []
    for plan in plans:
        if plan.retained.size + 1 != T:
            raise ValueError(
                f"plan retains {plan.retained.size} positions but latents have length {T}"
            )
        idx.append(assembly_index(plan))
    return ad.gather_rows(latents, np.stack(idx))


def decode_logits(p, cfg, s, train=False, rng=None):
    """Logits (B, S, V) for grid positions; decoder slot 0 is discarded."""
    if s.shape[1] != cfg.seq_len + 1:
        raise ValueError(f"decoder input length {s.shape[1]}, expected {cfg.seq_len + 1}")
    drop = _drop_rate(cfg, "decoder")
    x = ad.add(s, p["dec.pos"])
    for i in range(cfg.dec_depth):
        x = _block(p, f"dec.blocks.{i}", x, cfg, train, rng, drop)
    x = ad.layer_norm(x, p["dec.ln.g"], p["dec.ln.b"])
    x = ad.slice_axis(x, 1, cfg.seq_len + 1, axis=1)
    return ad.linear(x, p["dec.head.w"], p["dec.head.b"])


def _mlp(p, name, x, depth):
    for i in range(depth):
        x = ad.linear(x, p[f"{name}.{i}.w"], p[f"{name}.{i}.b"])
        if i < depth - 1:
            x = ad.gelu(x)
    return x


def pool(latents):
    return ad.mean(latents, axis=1)


def pool_project_predict(p, cfg, latents, branch="student", predictor=None):
    """Global average pool -> projector -> [predictor, student only] -> L2 normalise."""
    if branch not in ("student", "teacher"):
        raise ValueError(f"branch must be student or teacher, got {branch!r}")
    use_pred = cfg.predictor if predictor is None else predictor
    z = _mlp(p, "proj", pool(latents), cfg.proj_depth)
    if branch == "student" and use_pred:
        z = _mlp(p, "pred", z, cfg.pred_depth)
    return ad.l2_normalize(z)


# ------------------------------------------------------------------ checkpoint

CKPT_MAGIC = b"SORC"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_store(f, arrays):
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _CODES.get(arr.dtype, 0)
        f.write(struct.pack("<B", code))
        f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f, n, what):
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return raw


def _read_store(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4, "blob count"))
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, ln, "name").decode()
        (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
        (code,) = struct.unpack("<B", _read_exact(f, 1, "dtype"))
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(_read_exact(f, count * dt.itemsize, name), dtype=dt).reshape(shape).copy()
    return out


def save_checkpoint(path, cfg, student, teacher, opt_m=None, opt_v=None, extras=None):
    """Write a ``.sorc`` checkpoint.

    Layout: magic, u16 version, u32-length network config JSON, then four
    blob sections (student, teacher, first moments, second moments) and a
    u32-length JSON trailer with trainer bookkeeping. Each blob is
    ``u16 name length, name, u8 ndim, u32 dims, u8 dtype code, data``.
    """
    def arrays(store):
        if store is None:
            return {}
        return {k: (v.data if isinstance(v, Tensor) else v) for k, v in store.items()}

    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        raw = cfg.to_json().encode()
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for store in (student, teacher, opt_m, opt_v):
            _write_store(f, arrays(store))
        raw = json.dumps(extras or {}, sort_keys=True).encode()
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)


def load_checkpoint(path):
    """Returns a dict with ``config``, ``student``, ``teacher``, ``opt_m``, ``opt_v``, ``extras``."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg = NetworkConfig.from_json(_read_exact(f, n, "config").decode())
        student, teacher, opt_m, opt_v = (_read_store(f) for _ in range(4))
        (n,) = struct.unpack("<I", _read_exact(f, 4, "trailer length"))
        extras = json.loads(_read_exact(f, n, "trailer").decode())

    s = ParamStore()
    for k, v in student.items():
        s[k] = Tensor(v, requires_grad=True, name=k)
    t = ParamStore()
    for k, v in teacher.items():
        t[k] = Tensor(v, requires_grad=False, name=k)
    return {"config": cfg, "student": s, "teacher": t, "opt_m": opt_m, "opt_v": opt_v, "extras": extras}
