"""Effective-depth estimators over corpus-aggregated per-layer curves."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError

COSINE = "cosine-transition"
KL = "kl-halfmax"
OVERLAP = "overlap-threshold"
METHODS = (COSINE, KL, OVERLAP)


@dataclass(frozen=True)
class DetectorConfig:
    overlap_threshold: float = 0.3
    kl_fraction: float = 0.5

    def __post_init__(self):
        for name in ("overlap_threshold", "kl_fraction"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise InputError(f"{name} must lie in (0, 1), got {value}")


@dataclass(frozen=True)
class DepthEstimate:
    method: str
    ed: int
    ratio: float
    n_layers: int
    params: dict = field(default_factory=dict)
    flag: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "ed": self.ed,
            "ratio": self.ratio,
            "n_layers": self.n_layers,
            "params": dict(self.params),
            "flag": self.flag,
        }


def ratio(ed: int, n_layers: int) -> float:
    """Effective depth ratio ``(ed + 1) / L``."""
    if isinstance(ed, bool) or not isinstance(ed, (int, np.integer)):
        raise InputError(f"ed must be an int, got {ed!r}")
    if n_layers < 1 or not 0 <= ed < n_layers:
        raise InputError(f"need 0 <= ed < L, got ed={ed}, L={n_layers}")
    return (int(ed) + 1) / int(n_layers)


def _curve(values: Sequence[float], n_layers: Optional[int]) -> np.ndarray:
    curve = np.asarray(values, dtype=np.float64)
    if curve.ndim != 1 or curve.size == 0:
        raise InputError("curve must be a nonempty 1-D sequence")
    if n_layers is not None and curve.size != n_layers:
        raise InputError(f"curve has {curve.size} entries, expected L={n_layers}")
    if not np.all(np.isfinite(curve)):
        raise InputError("curve contains non-finite values")
    return curve


def _estimate(method, ed, L, params, flag=None) -> DepthEstimate:
    return DepthEstimate(method, int(ed), ratio(int(ed), L), L, params, flag)


def ed_from_cosine(avg_curve: Sequence[float], n_layers: Optional[int] = None) -> DepthEstimate:
    """Last layer whose averaged cosine is negative while every later layer is >= 0.

    A curve with no negative entry yields ``ed = 0`` (flag
    ``no-negative-phase``); a curve still negative at the last layer yields
    ``ed = L - 1`` (flag ``no-transition``).
    """
    curve = _curve(avg_curve, n_layers)
    L = curve.size
    negative = np.flatnonzero(curve < 0)
    if negative.size == 0:
        return _estimate(COSINE, 0, L, {}, "no-negative-phase")
    last = int(negative[-1])
    return _estimate(COSINE, last, L, {}, "no-transition" if last == L - 1 else None)


def ed_from_kl(kl_curve: Sequence[float], n_layers: Optional[int] = None, cfg: DetectorConfig = DetectorConfig()):
    """First layer whose KL drops strictly below ``kl_fraction`` of the curve maximum."""
    curve = _curve(kl_curve, n_layers)
    if np.any(curve < 0):
        raise InputError("KL curve has negative entries")
    L = curve.size
    params = {"kl_fraction": cfg.kl_fraction}
    peak = curve.max()
    if peak == 0:
        return _estimate(KL, 0, L, params, "zero-curve")
    below = np.flatnonzero(curve < cfg.kl_fraction * peak)
    if below.size == 0:
        return _estimate(KL, L - 1, L, params, "no-crossing")
    return _estimate(KL, below[0], L, params)


def ed_from_overlap(
    overlap_curve: Sequence[float], n_layers: Optional[int] = None, cfg: DetectorConfig = DetectorConfig()
):
    """First layer whose top-5 overlap strictly exceeds ``overlap_threshold``."""
    curve = _curve(overlap_curve, n_layers)
    if np.any((curve < 0) | (curve > 1)):
        raise InputError("overlap curve entries must lie in [0, 1]")
    L = curve.size
    params = {"overlap_threshold": cfg.overlap_threshold}
    above = np.flatnonzero(curve > cfg.overlap_threshold)
    if above.size == 0:
        return _estimate(OVERLAP, L - 1, L, params, "no-crossing")
    return _estimate(OVERLAP, above[0], L, params)
