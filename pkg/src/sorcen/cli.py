"""Command-line driver: ``sorcen <command> [--flag value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every flag can also be given in a ``--config`` file as ``key=value`` (the
key is the flag name without dashes, or the matching config field name);
flags on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .generation import DecodeConfig, generate, inpaint, random_visible, rect_visible, save_token_png
from .model import NetworkConfig
from .objectives import LossConfig
from .rng import resolve_seed, stream
from .tokens import (
    HEADER,
    SyntheticSpec,
    TokenFormatError,
    generate_synthetic,
    read_dataset,
    read_header,
    write_dataset,
)
from .training import STAGES, NonFiniteLoss, TrainConfig, Trainer, parse_config_file, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_range(text):
    if text in (None, "", "none", "None"):
        return None
    parts = str(text).replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _int_list(text):
    return [int(t) for t in str(text).replace(",", " ").split()]


def _opt_float(text):
    return None if text in (None, "", "none", "None") else float(text)


@dataclass
class Opt:
    key: str
    type: object
    default: object = None
    aliases: tuple = ()
    help: str = ""
    required: bool = False


def _from_fields(cls, skip=(), aliases=None, helps=None):
    aliases = aliases or {}
    helps = helps or {}
    out = []
    for f in fields(cls):
        if f.name in skip or not f.init:
            continue
        default = f.default
        if default is None:
            typ = _int_range if f.name == "jsm_range" else _opt_float
        elif isinstance(default, bool):
            typ = _bool
        else:
            typ = type(default)
        out.append(Opt(f.name, typ, default, tuple(aliases.get(f.name, ())), helps.get(f.name, "")))
    return out


SYNTH = _from_fields(SyntheticSpec, skip=("background",)) + [
    Opt("n", int, 4096, help="number of sequences"),
    Opt("split", int, 0, help="split index; different splits draw different samples"),
    Opt("out", str, required=True, help="output .stok path"),
]
NET = _from_fields(NetworkConfig, skip=("vocab", "seq_len", "predictor"))
TRAIN = _from_fields(TrainConfig)
LOSS = _from_fields(LossConfig, aliases={"lam": ("--lambda",), "top_k": ("--k",)})
DECODE = _from_fields(DecodeConfig)


def _dedupe(opts):
    seen, out = set(), []
    for o in opts:
        if o.key not in seen:
            seen.add(o.key)
            out.append(o)
    return out


COMMANDS = {
    "synth": (SYNTH, "write a labeled synthetic token dataset"),
    "pack": (
        [
            Opt("input", str, required=True, help=".npy or whitespace-separated text of token ids, one row per sequence"),
            Opt("labels", str, None, help="optional .npy or text file of integer labels"),
            Opt("vocab", int, required=True),
            Opt("out", str, required=True),
        ],
        "pack raw token ids into a .stok file",
    ),
    "inspect": ([Opt("data", str, required=True), Opt("show", int, 0, help="print the first N records")],
                "print the header of a .stok file"),
    "train": (
        [Opt("data", str, required=True), Opt("out", str, required=True), Opt("log", str, None),
         Opt("resume", str, None), Opt("stop_after", int, None)]
        + _dedupe(NET + TRAIN + LOSS),
        "pre-train a model on a .stok dataset",
    ),
    "generate": (
        [Opt("checkpoint", str, required=True), Opt("n", int, 64), Opt("out", str, required=True),
         Opt("png", str, None)] + DECODE,
        "sample token sequences by iterative decoding",
    ),
    "inpaint": (
        [Opt("checkpoint", str, required=True), Opt("data", str, required=True), Opt("out", str, required=True),
         Opt("n", int, 64), Opt("region", str, "random", help="random | center | outpaint"),
         Opt("masked_fraction", float, 0.75), Opt("png", str, None)] + DECODE,
        "regenerate hidden positions of sequences from a dataset",
    ),
    "probe": (
        [Opt("checkpoint", str, required=True), Opt("train", str, required=True), Opt("test", str, required=True),
         Opt("l2", float, 1e-4), Opt("cache_dir", str, None), Opt("csv", str, None)],
        "linear-probe accuracy on frozen features",
    ),
    "knn": (
        [Opt("checkpoint", str, required=True), Opt("train", str, required=True), Opt("test", str, required=True),
         Opt("k", int, 20), Opt("cache_dir", str, None), Opt("csv", str, None)],
        "cosine k-NN accuracy on frozen features",
    ),
    "fewshot": (
        [Opt("checkpoint", str, required=True), Opt("train", str, required=True), Opt("test", str, required=True),
         Opt("shots", _int_list, [1, 5, 10]), Opt("seeds", int, 5), Opt("l2", float, 1e-4),
         Opt("cache_dir", str, None), Opt("csv", str, None)],
        "few-shot linear-probe accuracy",
    ),
    "tfd": (
        [Opt("checkpoint", str, required=True), Opt("real", str, required=True), Opt("generated", str, required=True),
         Opt("csv", str, None)],
        "token Fréchet distance between two datasets",
    ),
    "bench": (
        [Opt("data", str, required=True), Opt("steps", int, 200)] + _dedupe(NET + TRAIN + LOSS),
        "per-stage timing of training steps",
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = _Parser(prog="sorcen", allow_abbrev=False, description="Token-level self-supervised pre-training toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (opts, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext, allow_abbrev=False)
        p.add_argument("--config", default=None, help="key=value file with defaults for any flag")
        for o in opts:
            p.add_argument(_flag(o.key), *o.aliases, dest=o.key, type=o.type, default=None, help=o.help)
    return parser


def _config_key(name, opts):
    k = name.strip().lstrip("-").replace("-", "_")
    for o in opts:
        if k == o.key or k in (a.lstrip("-") for a in o.aliases):
            return o
    return None


def resolve(argv):
    """Parse ``argv`` into ``(command, settings dict)`` with defaults, file values and flags merged."""
    args = build_parser().parse_args(argv)
    opts, _ = COMMANDS[args.command]
    settings = {o.key: o.default for o in opts}
    if args.config:
        try:
            raw = parse_config_file(args.config)
        except OSError as e:
            raise DataError(str(e)) from e
        except ValueError as e:
            raise UsageError(str(e)) from e
        for k, v in raw.items():
            o = _config_key(k, opts)
            if o is None:
                raise UsageError(f"{args.config}: unknown key {k!r} for command {args.command}")
            try:
                settings[o.key] = o.type(v)
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise UsageError(f"{args.config}: bad value for {k}: {e}") from e
    for o in opts:
        v = getattr(args, o.key)
        if v is not None:
            settings[o.key] = v
    missing = [_flag(o.key) for o in opts if o.required and settings[o.key] is None]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")
    if "seed" in settings:
        settings["seed"] = resolve_seed(settings["seed"])
    return args.command, settings


def _pick(cls, settings, **extra):
    known = {f.name for f in fields(cls)}
    kw = {k: v for k, v in settings.items() if k in known}
    kw.update(extra)
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e


def _print_config(command, settings):
    shown = {k: (list(v) if isinstance(v, tuple) else v) for k, v in settings.items()}
    print(f"# sorcen {command}")
    print("# config " + json.dumps(shown, sort_keys=True, default=str))
    if "seed" in settings:
        print(f"# seed {settings['seed']}")


def _read(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such file") from e


def _load_ids(path):
    p = Path(path)
    try:
        arr = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, dtype=np.int64, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: {e}") from e
    return np.asarray(arr)


def _write_metrics(path, rows):
    if not path:
        return
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(v) if isinstance(v, float) else v])


def _checkpoint(path):
    from .model import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise DataError(f"{path}: no such file") from e


def _features(s, which):
    from .evaluation import cached_features

    fm = cached_features(s["checkpoint"], s[which], s.get("cache_dir"))
    if fm.labels is None:
        raise DataError(f"{s[which]}: dataset has no labels")
    return fm


# ------------------------------------------------------------------ commands


def cmd_synth(s):
    spec = _pick(SyntheticSpec, s)
    ids, labels = generate_synthetic(spec, s["n"], s["split"])
    write_dataset(s["out"], ids, spec.vocab, labels)
    print(f"wrote {s['n']} sequences of {spec.seq_len} tokens (vocab {spec.vocab}) to {s['out']}")


def cmd_pack(s):
    ids = _load_ids(s["input"])
    labels = _load_ids(s["labels"]).ravel() if s["labels"] else None
    write_dataset(s["out"], ids, s["vocab"], labels)
    print(f"packed {ids.shape[0]} sequences to {s['out']}")


def cmd_inspect(s):
    try:
        h = read_header(s["data"])
    except FileNotFoundError as e:
        raise DataError(f"{s['data']}: no such file") from e
    size = Path(s["data"]).stat().st_size
    print(f"magic          STOK")
    print(f"version        {h.version}")
    print(f"vocab          {h.vocab}")
    print(f"seq_len        {h.seq_len}")
    print(f"count          {h.count}")
    print(f"labeled        {int(h.labeled)}")
    print(f"bits_per_token {h.bits}")
    print(f"record_bytes   {h.record_bytes}")
    print(f"header_bytes   {HEADER.size}")
    print(f"file_bytes     {size}")
    if s["show"]:
        _, ids, labels = _read(s["data"])
        for i in range(min(s["show"], len(ids))):
            lab = f" label={labels[i]}" if labels is not None else ""
            print(f"[{i}]{lab} " + " ".join(map(str, ids[i])))


def _net_for(s, header):
    return _pick(NetworkConfig, s, vocab=header.vocab, seq_len=header.seq_len)


def cmd_train(s):
    header, ids, _ = _read(s["data"])
    net = _net_for(s, header)
    tcfg = _pick(TrainConfig, s)
    lcfg = _pick(LossConfig, s)
    t0 = time.perf_counter()
    tr = run_training(ids, net, tcfg, lcfg, s["out"], s["log"], s["resume"], s["stop_after"])
    log_path = s["log"] or str(Path(s["out"]).with_suffix(".metrics.csv"))
    with open(log_path) as f:
        rows = list(csv.DictReader(f))
    last = rows[-1] if rows else {}
    print(f"steps          {tr.step}")
    print(f"final recon    {last.get('recon', 'n/a')}")
    print(f"final contrast {last.get('contrastive', 'n/a')}")
    print(f"teacher passes {tr.teacher_forwards}")
    print(f"wall time      {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint     {s['out']}")
    print(f"metrics        {log_path}")


def _decode_cfg(s):
    return _pick(DecodeConfig, s)


def cmd_generate(s):
    ck = _checkpoint(s["checkpoint"])
    cfg = ck["config"]
    out = generate(ck["student"], cfg, s["n"], _decode_cfg(s))
    write_dataset(s["out"], out, cfg.vocab)
    if s["png"]:
        save_token_png(s["png"], out[:64], cfg.vocab)
    print(f"generated {s['n']} sequences with {s['steps']} steps to {s['out']}")


def cmd_inpaint(s):
    ck = _checkpoint(s["checkpoint"])
    cfg = ck["config"]
    header, ids, _ = _read(s["data"])
    if header.vocab != cfg.vocab or header.seq_len != cfg.seq_len:
        raise DataError(f"{s['data']}: geometry {header.vocab}/{header.seq_len} does not match the checkpoint")
    ids = ids[: s["n"]]
    G = cfg.grid
    if s["region"] == "random":
        rng = stream(s["seed"], "inpaint")
        vis = np.stack([random_visible(cfg.seq_len, s["masked_fraction"], rng) for _ in ids])
    elif s["region"] in ("center", "outpaint"):
        h = max(1, int(round(G * math.sqrt(1 - s["masked_fraction"]))))
        lo = (G - h) // 2
        centre = rect_visible(G, lo, lo, h, h)
        # center: hide the middle square; outpaint: keep only the middle square
        vis = ~centre if s["region"] == "center" else centre
    else:
        raise UsageError(f"unknown region {s['region']!r}; use random, center or outpaint")
    out = inpaint(ck["student"], cfg, ids, vis, _decode_cfg(s))
    write_dataset(s["out"], out, cfg.vocab)
    if s["png"]:
        shown = np.where(np.broadcast_to(vis, ids.shape), ids, cfg.mask_id)
        both = np.stack([shown[:32], out[:32], ids[:32]], axis=1).reshape(-1, cfg.seq_len)
        save_token_png(s["png"], both, cfg.vocab, per_row=6)
    kept = np.mean(np.broadcast_to(vis, ids.shape))
    print(f"inpainted {len(ids)} sequences ({kept:.1%} visible) to {s['out']}")


def cmd_probe(s):
    from .evaluation import linear_probe

    tr, te = _features(s, "train"), _features(s, "test")
    acc, train_acc = linear_probe(tr.features, tr.labels, te.features, te.labels, l2=s["l2"], return_train=True)
    print(f"linear probe   test {acc:.4f}   train {train_acc:.4f}")
    _write_metrics(s["csv"], [("probe_test", acc), ("probe_train", train_acc)])


def cmd_knn(s):
    from .evaluation import knn_eval

    tr, te = _features(s, "train"), _features(s, "test")
    acc = knn_eval(tr.features, tr.labels, te.features, te.labels, k=s["k"])
    print(f"knn (k={s['k']})     {acc:.4f}")
    _write_metrics(s["csv"], [(f"knn_k{s['k']}", acc)])


def cmd_fewshot(s):
    from .evaluation import few_shot_eval

    tr, te = _features(s, "train"), _features(s, "test")
    rows = []
    for shots in s["shots"]:
        acc = few_shot_eval(tr.features, tr.labels, te.features, te.labels, shots,
                            seeds=tuple(range(s["seeds"])), l2=s["l2"])
        print(f"{shots:>4}-shot      {acc:.4f}")
        rows.append((f"fewshot_{shots}", acc))
    _write_metrics(s["csv"], rows)


def cmd_tfd(s):
    from .evaluation import token_frechet_distance

    ck = _checkpoint(s["checkpoint"])
    _, real, _ = _read(s["real"])
    _, gen, _ = _read(s["generated"])
    d = token_frechet_distance(ck["student"], ck["config"], real, gen)
    print(f"token frechet  {d:.6f}")
    _write_metrics(s["csv"], [("token_frechet", d)])


def cmd_bench(s):
    header, ids, _ = _read(s["data"])
    net = _net_for(s, header)
    tcfg = _pick(TrainConfig, s)
    lcfg = _pick(LossConfig, s)
    steps_per_epoch = math.ceil(len(ids) / tcfg.batch_size)
    tr = Trainer(net, tcfg, lcfg, steps_per_epoch)
    # time the post-warmup path so the echo stages are exercised
    tr.echo_warmup_steps = 0
    t0 = time.perf_counter()
    done = 0
    epoch = 0
    while done < s["steps"]:
        for idx in tr.batches_for_epoch(len(ids), epoch):
            if done >= s["steps"]:
                break
            tr.train_step(ids[idx])
            done += 1
        epoch += 1
    total = time.perf_counter() - t0
    print(f"{'stage':<10}{'total_s':>10}{'per_step_ms':>14}{'share':>8}")
    for stage in STAGES:
        t = tr.timings[stage]
        print(f"{stage:<10}{t:>10.3f}{1000 * t / max(1, done):>14.2f}{t / total:>8.1%}")
    print(f"{'all':<10}{total:>10.3f}{1000 * total / max(1, done):>14.2f}{1:>8.0%}")


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def dispatch(argv=None):
    """Run one command; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, settings = resolve(argv)
        _print_config(command, settings)
        HANDLERS[command](settings)
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TokenFormatError, OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE


def main():
    sys.exit(dispatch())
