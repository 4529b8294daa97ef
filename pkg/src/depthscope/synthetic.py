"""Synthetic residual traces and lens curves with a planted transition layer.

Each synthetic layer behaves in one of three ways, chosen by depth:

* ``l <= k_write``: both sublayers write directions orthogonal to the
  residual they read (Gram-Schmidt), cosine ~ 0;
* ``k_write < l <= k_star``: each sublayer subtracts ``alpha`` of the
  residual it reads (erasure, cosine < 0);
* ``l > k_star``: each sublayer adds ``alpha`` of it (amplification, cosine > 0).

So the averaged cosine curve turns nonnegative right after ``k_star``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .detectors import COSINE, KL, METHODS, OVERLAP, ed_from_cosine, ed_from_kl, ed_from_overlap
from .errors import InputError
from .model import LayerTrace
from .probes import cosine_profile

ALPHA = 0.2
LAYER_CHOICES = (8, 16, 28, 48, 64)


@dataclass(frozen=True)
class SyntheticTraceSpec:
    n_layers: int
    d: int
    k_write: int
    k_star: int
    noise_sigma: float = 0.0
    seed: int = 0
    n_positions: int = 4

    def validate(self):
        if self.n_layers < 1 or self.d < 3 or self.n_positions < 1:
            raise InputError("need n_layers >= 1, d >= 3, n_positions >= 1")
        if not 0 <= self.k_write <= self.k_star < self.n_layers:
            raise InputError(
                f"need 0 <= k_write <= k_star < L, got k_write={self.k_write}, k_star={self.k_star}, L={self.n_layers}"
            )
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")


@dataclass
class PlantedCurves:
    trace: LayerTrace
    kl: np.ndarray
    overlap: np.ndarray
    truth: dict


def _orthogonal_unit(rng, basis):
    v = rng.standard_normal(basis[0].shape)
    for _ in range(2):
        for u in basis:
            uu = u @ u
            if uu > 0:
                v = v - (v @ u) / uu * u
    return v / np.linalg.norm(v)


def _contribution(rng, phase, reads, basis, sigma):
    scale = np.linalg.norm(reads)
    if phase == "write":
        out = ALPHA * scale * _orthogonal_unit(rng, basis)
    elif phase == "erase":
        out = -ALPHA * reads
    else:
        out = ALPHA * reads
    if sigma > 0:
        out = out + sigma * scale / np.sqrt(reads.size) * rng.standard_normal(reads.shape)
    return out


def gen_trace(spec: SyntheticTraceSpec) -> LayerTrace:
    """Residual trace obeying ``hhat = h + a`` and ``h_next = hhat + m`` exactly."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    L, n, d = spec.n_layers, spec.n_positions, spec.d
    h = np.zeros((L + 1, n, d))
    a = np.zeros((L, n, d))
    m = np.zeros((L, n, d))
    hhat = np.zeros((L, n, d))
    h[0] = rng.standard_normal((n, d))
    for l in range(L):
        phase = "write" if l <= spec.k_write else "erase" if l <= spec.k_star else "amplify"
        for t in range(n):
            a[l, t] = _contribution(rng, phase, h[l, t], [h[l, t]], spec.noise_sigma)
            hhat[l, t] = h[l, t] + a[l, t]
            m[l, t] = _contribution(rng, phase, hhat[l, t], [h[l, t], a[l, t]], spec.noise_sigma)
            h[l + 1, t] = hhat[l, t] + m[l, t]
    empty = np.zeros((n, 0))
    return LayerTrace(np.zeros(n, dtype=np.int64), h, a, hhat, m, empty, empty)


def planted_lens_curves(n_layers: int, k: int, noise_sigma: float = 0.0, rng=None):
    """KL curve whose half-max crossing and overlap curve whose 0.3 crossing are both at ``k``."""
    if not 1 <= k < n_layers:
        raise InputError(f"planted lens layer must lie in [1, L), got {k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = np.arange(n_layers)
    kl = 8.0 * np.exp(-np.log(2.0) / (k - 0.5) * layers)
    kl[-1] = 0.0
    overlap = np.where(layers >= k, np.minimum(1.0, 0.4 + 0.2 * (layers - k)), 0.0)
    overlap[(layers < k) & (layers >= k - 2)] = 0.2
    overlap[-1] = 1.0
    if noise_sigma > 0:
        kl[:-1] *= np.exp(noise_sigma * rng.standard_normal(n_layers - 1))
        jitter = 0.2 * np.round(5 * noise_sigma * rng.standard_normal(n_layers - 1))
        overlap[:-1] = np.clip(overlap[:-1] + jitter, 0.0, 1.0)
    return kl, overlap


def generate(spec: SyntheticTraceSpec) -> PlantedCurves:
    trace = gen_trace(spec)
    rng = np.random.default_rng([spec.seed, 1])
    kl, overlap = planted_lens_curves(spec.n_layers, spec.k_star, spec.noise_sigma, rng)
    truth = {COSINE: spec.k_star, KL: spec.k_star, OVERLAP: spec.k_star}
    return PlantedCurves(trace, kl, overlap, truth)


def detect_all(planted: PlantedCurves) -> dict:
    L = planted.kl.size
    return {
        COSINE: ed_from_cosine(cosine_profile(planted.trace).avg, L).ed,
        KL: ed_from_kl(planted.kl, L).ed,
        OVERLAP: ed_from_overlap(planted.overlap, L).ed,
    }


def validate_detectors(
    n_seeds: int,
    layer_choices=LAYER_CHOICES,
    noise_sigma: float = 0.0,
    base_seed: int = 0,
    d: int = 16,
) -> dict:
    """Run every detector on ``n_seeds`` planted traces and tally recovery.

    Seed ``i`` uses ``L = layer_choices[i % len(layer_choices)]`` with
    ``k_star`` drawn from ``[1, L)`` and ``k_write`` from ``[0, k_star)``.
    """
    if n_seeds < 1:
        raise InputError("n_seeds must be >= 1")
    entries = []
    misses = {method: Counter() for method in METHODS}
    for i in range(n_seeds):
        rng = np.random.default_rng([base_seed, i])
        L = int(layer_choices[i % len(layer_choices)])
        k_star = int(rng.integers(1, L))
        k_write = int(rng.integers(0, k_star))
        spec = SyntheticTraceSpec(L, d, k_write, k_star, noise_sigma, seed=int(rng.integers(2**63)))
        found = detect_all(generate(spec))
        for method in METHODS:
            misses[method][found[method] - k_star] += 1
        entries.append(
            {"seed": i, "n_layers": L, "k_write": k_write, "k_star": k_star, "detected": found}
        )
    summary = {
        method: {
            "recovery_rate": misses[method][0] / n_seeds,
            "off_by": {str(k): v for k, v in sorted(misses[method].items())},
        }
        for method in METHODS
    }
    return {"n_seeds": n_seeds, "noise_sigma": noise_sigma, "detectors": summary, "entries": entries}
