"""
Mask&Drop and jittered spatial masking
======================================

Training hides a random share of each token grid (at least half) and then
shortens the encoder input to S/2 positions plus a leading extra token E.
Echoes get a different treatment: only a random square window stays
visible.
"""

import numpy as np

from sorcen.masking import (
    jittered_spatial_mask,
    jsm_visibility_probability,
    mask_and_drop,
    sample_mask_ratio,
    truncated_normal_mean,
)

rng = np.random.default_rng(0)

###############################################################################
# Mask ratios come from a Normal(0.55, 0.25) truncated to [0.5, 1]
r = sample_mask_ratio(rng, size=100_000)
print(f"ratio range [{r.min():.3f}, {r.max():.3f}]  mean {r.mean():.4f}  "
      f"(integrated {truncated_normal_mean():.4f})")
print(np.histogram(r, bins=5, range=(0.5, 1.0))[0])

###############################################################################
# One grid through Mask&Drop. M = 64 is the mask id, E = 65 the extra token
S, M, E = 64, 64, 65
seq = rng.integers(0, 64, S)
ids, pos, plan = mask_and_drop(seq, rng, M, E)
print(f"ratio {plan.ratio:.3f}: {plan.num_masked} masked, {plan.dropped.size} dropped")
print("encoder ids:", ids)
print("positions:  ", pos)

# grid view: . visible and kept, m masked but kept, x dropped
view = np.full(S, ".")
view[plan.mask] = "m"
view[plan.dropped] = "x"
print("\n".join(" ".join(row) for row in view.reshape(8, 8)))

###############################################################################
# JSM on an echo: a random N x N window survives, N in [G/4, 3G/4]
echo = rng.integers(0, 64, S)
masked, jp = jittered_spatial_mask(echo, rng, M, grid=8)
print(f"window {jp.size}x{jp.size} at ({jp.row}, {jp.col})")
print((masked != M).reshape(8, 8).astype(int))

# how often each cell is visible, by exact enumeration of windows
print(jsm_visibility_probability(8).reshape(8, 8).round(2))
