"""
Echoes and the contrastive loss
===============================

An echo replaces every token by a plausible alternative: a draw from the
decoder's distribution restricted to ranks 2..K, so the most likely token is
never used. Student features of the masked anchor are pulled toward teacher
features of its echo and pushed away from the other echoes in the batch.
"""

import math

import numpy as np

from sorcen.autodiff import Tensor, l2_normalize
from sorcen.objectives import contrastive_loss, rank_candidates, sample_echo

rng = np.random.default_rng(0)

###############################################################################
# Candidate sets and sampling on a toy vocabulary of six codes
logits = np.array([2.0, 0.5, 3.0, 1.0, -1.0, 0.5])
print("ranks 2..4:", rank_candidates(logits, 4))
draws, _ = sample_echo(np.tile(logits, (20_000, 1)), 4, rng)
print("frequencies:", np.bincount(draws, minlength=6) / len(draws))

# the three-code case with a known answer: 2/3 and 1/3
draws, _ = sample_echo(np.tile([5.0, math.log(2), 0.0], (100_000, 1)), 3, rng)
print("analytic case:", np.bincount(draws, minlength=3) / len(draws))

###############################################################################
# InfoNCE plus the uniformity penalty on a batch of random unit vectors
z = l2_normalize(Tensor(rng.normal(size=(8, 16))))
z_echo = l2_normalize(Tensor(z.data + 0.1 * rng.normal(size=(8, 16))))
print("aligned pairs:  ", float(contrastive_loss(z, z_echo).data))
print("shuffled pairs: ", float(contrastive_loss(z, z_echo.data[rng.permutation(8)]).data))
print("l2 variant:     ", float(contrastive_loss(z, z_echo, variant="l2").data))

# closed form: two orthogonal pairs at temperature 1
e = np.eye(2, 4)
print(float(contrastive_loss(Tensor(e), e, tau=1.0).data), math.log1p(math.exp(-1)) + 0.1)
