"""Do the detectors find a transition we planted ourselves?

Synthetic traces write orthogonal directions, then erase (negative cosine),
then amplify (positive cosine).  Lens curves are built to cross their
thresholds at the same layer.
"""

from depthscope.probes import cosine_profile
from depthscope.synthetic import SyntheticTraceSpec, detect_all, generate, validate_detectors

planted = generate(SyntheticTraceSpec(n_layers=16, d=16, k_write=3, k_star=10, seed=0))
print("averaged cosine curve:", " ".join(f"{v:+.2f}" for v in cosine_profile(planted.trace).avg))
print("detected:", detect_all(planted), " planted k* = 10")

for sigma in (0.0, 0.05, 0.2):
    rep = validate_detectors(100, noise_sigma=sigma)
    rates = ", ".join(f"{m} {s['recovery_rate']:.2f}" for m, s in rep["detectors"].items())
    print(f"noise {sigma:<4}: {rates}")
