"""
Iterative decoding and inpainting
=================================

Start from an all-mask grid and commit tokens over T decoder passes,
keeping the most confident ones and following a cosine schedule for how many
stay masked. Inpainting is the same loop started from a partially visible
grid. Run ``pretraining.py`` first, or this falls back to an untrained model.
"""

from pathlib import Path

import numpy as np

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
from sorcen.model import NetworkConfig, init_student, load_checkpoint
from sorcen.tokens import SyntheticSpec, generate_synthetic

out = Path("demo_out")
out.mkdir(exist_ok=True)
if (out / "model.sorc").exists():
    ck = load_checkpoint(out / "model.sorc")
    params, cfg = ck["student"], ck["config"]
else:
    cfg = NetworkConfig(vocab=64, seq_len=64, dim=32, enc_depth=1, dec_depth=1, heads=2)
    params = init_student(cfg)

###############################################################################
# The schedule: how many positions are still masked after step k
print([masked_count_at(k, 20, 256) for k in range(1, 21)])

###############################################################################
# Unconditional samples, with the masked count after every step
trace = []
init = np.full((16, cfg.seq_len), cfg.mask_id)
samples = iterative_decode(params, cfg, init, DecodeConfig(steps=20), trace=trace)
print("still masked per step:", [int(t[0]) for t in trace])
save_token_png(out / "samples.png", samples, cfg.vocab)

###############################################################################
# Inpainting: hide 75% of each test grid at random and fill it back in
spec = SyntheticSpec(classes=8, grid=8, vocab=64, rho=0.25, seed=0)
Xt, yt = generate_synthetic(spec, 16, split=1)
rng = np.random.default_rng(0)
vis = np.stack([random_visible(cfg.seq_len, 0.75, rng) for _ in Xt])
filled = inpaint(params, cfg, Xt, vis)
assert np.array_equal(filled[vis], Xt[vis])
print("hidden tokens recovered:", np.mean(filled[~vis] == Xt[~vis]).round(3))
print("hidden tokens matching the prototype:", np.mean((filled == spec.prototypes[yt, 0])[~vis]).round(3))

# outpainting keeps only the centre and regenerates the border
centre = rect_visible(cfg.grid, 2, 2, 4, 4)
grown = inpaint(params, cfg, Xt, centre)
print("border tokens matching the prototype:", np.mean((grown == spec.prototypes[yt, 0])[:, ~centre]).round(3))
shown = np.where(vis, Xt, cfg.mask_id)
save_token_png(out / "inpaint.png", np.stack([shown, filled, Xt], 1).reshape(-1, cfg.seq_len),
               cfg.vocab, per_row=6)
print(len(generate(params, cfg, 4)), "more samples")
