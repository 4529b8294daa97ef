"""Turning per-layer curves into an effective depth and a depth ratio."""

import numpy as np

from depthscope import DetectorConfig, ed_from_cosine, ed_from_kl, ed_from_overlap, ratio

L = 28
layers = np.arange(L)
cosine = np.where(layers <= 16, -0.2, 0.15)
kl = 6.0 * np.exp(-layers / 12.0)
kl[-1] = 0.0
overlap = np.clip((layers - 14) / 10.0, 0.0, 1.0)

for est in (ed_from_cosine(cosine), ed_from_kl(kl), ed_from_overlap(overlap)):
    print(f"{est.method:<18} ED = {est.ed:2d}   ratio = {est.ratio:.2f}   flag = {est.flag}")

# Thresholds are parameters, not constants.
strict = DetectorConfig(overlap_threshold=0.6)
print("overlap ED with threshold 0.6:", ed_from_overlap(overlap, cfg=strict).ed)

# ratio = (ED + 1) / L; a few pairs with their two-decimal values.
for ed, n in [(16, 28), (23, 28), (46, 64)]:
    print(f"ratio({ed}, {n}) = {ratio(ed, n):.2f}")
