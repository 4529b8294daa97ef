"""The five probes on a single prompt of the tiny model."""

import numpy as np

from depthscope import compute_baseline, forward, init_random, preset
from depthscope.corpus import record_from_json
from depthscope.probes import (
    cosine_profile,
    erasure_effect,
    gradient_attribution,
    lens_profile,
    sample_cutoffs,
    skip_effect,
)

np.set_printoptions(precision=3, suppress=True)
weights = init_random(preset("tiny"), seed=0)
corpus = [record_from_json({"id": str(i), "text": f"{i} plus {i} is", "answer": f" {2 * i}"}) for i in range(4)]
rec = corpus[1]
trace = forward(weights, rec.tokens)

cos = cosine_profile(trace)
print("cosine of contribution with residual, per layer (avg of full/attn/mlp):\n", cos.avg)

lens = lens_profile(trace, weights, rec.prediction_positions())
print("lens KL to the final output:\n", lens.kl)
print("lens top-5 overlap:\n", lens.overlap)

cutoffs = sample_cutoffs(len(rec.tokens), np.random.default_rng(0))
out = [skip_effect(weights, rec, s, cutoffs, trace).output_change for s in range(8)]
print(f"output change when skipping each layer (cutoffs {cutoffs}):\n", np.array(out))

baseline = compute_baseline(weights, corpus)
erased = erasure_effect(weights, rec, baseline, trace)
print("erasure: strongest effect per layer:\n", erased.effect.max(axis=1))

attr = gradient_attribution(weights, rec, "path", steps=32, baseline=baseline, base=trace)
print("path attribution, total |score| per residual layer 0..L:\n", np.abs(attr.score).sum(axis=1))
