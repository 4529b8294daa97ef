"""A seeded pre-norm transformer and the residual snapshots it exposes.

Every layer reads a normalised copy of the residual ``h_l`` and adds two
contributions to it: attention output ``a_l`` and MLP output ``m_l``.
"""

import numpy as np

from depthscope import byte_tokenize, forward, init_random, preset
from depthscope.model import InterventionSpec, decode_lens

cfg = preset("tiny")
weights = init_random(cfg, seed=0)
print(f"tiny preset: L={cfg.n_layers}, d_model={cfg.d_model}, heads {cfg.n_q_heads}/{cfg.n_kv_heads}")

tokens = byte_tokenize("The cat sat on the mat")
trace = forward(weights, tokens)
print("residual stack h:", trace.h.shape, " contributions a, m:", trace.a.shape)

norms = np.linalg.norm(trace.h, axis=-1).mean(axis=1)
for l, v in enumerate(norms):
    print(f"  mean ||h_{l}|| = {v:.4f}")

# Decoding the last residual through the output head gives the model output.
assert decode_lens(weights, trace.h[-1]).tobytes() == trace.y.tobytes()

# Skip layer 3 for the first five positions and see the output move.
skipped = forward(weights, tokens, InterventionSpec.skip(3, 4))
print("max |y - y_skip| after the cutoff:", float(np.abs(trace.y[5:] - skipped.y[5:]).max()))

# The larger shapes keep their layer and head counts when shrunk.
for name in ("1.5B-shape", "32B-shape"):
    small = preset(name, scale_factor=0.02)
    print(f"{name} at 2%: L={small.n_layers}, d_model={small.d_model}, heads {small.n_q_heads}/{small.n_kv_heads}")
