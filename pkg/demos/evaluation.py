"""
Evaluating frozen features
==========================

Mean-pooled encoder outputs are the representation. We probe them with
logistic regression, cosine k-NN and few-shot probes, and score generated
grids with a Fréchet distance computed in the same feature space.
"""

from pathlib import Path

import numpy as np

from sorcen.evaluation import (
    extract_features,
    few_shot_eval,
    knn_eval,
    linear_probe,
    token_frechet_distance,
)
from sorcen.generation import generate
from sorcen.model import NetworkConfig, init_student, load_checkpoint
from sorcen.tokens import SyntheticSpec, generate_synthetic

out = Path("demo_out")
if (out / "model.sorc").exists():
    ck = load_checkpoint(out / "model.sorc")
    params, cfg = ck["student"], ck["config"]
else:
    cfg = NetworkConfig(vocab=64, seq_len=64, dim=32, enc_depth=1, dec_depth=1, heads=2)
    params = init_student(cfg)

spec = SyntheticSpec(classes=8, grid=8, vocab=64, rho=0.25, seed=0)
X, y = generate_synthetic(spec, 4096, split=0)
Xt, yt = generate_synthetic(spec, 1024, split=1)

F, Ft = extract_features(params, cfg, X), extract_features(params, cfg, Xt)
print(F.shape)

###############################################################################
# Discriminative metrics (chance is 1/8)
print("linear probe", linear_probe(F, y, Ft, yt))
print("kNN k=20   ", knn_eval(F, y, Ft, yt, k=20))
for shots in (1, 5, 10):
    print(f"{shots:>2}-shot     ", round(few_shot_eval(F, y, Ft, yt, shots), 4))

###############################################################################
# Generative metric: generated grids against held-out grids, with uniform
# random grids as the reference point
G = generate(params, cfg, 512)
U = np.random.default_rng(0).integers(0, 64, (512, 64))
print("Frechet, generated:", token_frechet_distance(params, cfg, Xt[:512], G))
print("Frechet, uniform:  ", token_frechet_distance(params, cfg, Xt[:512], U))
