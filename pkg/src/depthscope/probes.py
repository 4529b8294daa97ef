"""The five residual-stream probes and their corpus aggregation.

Aggregation order everywhere except the skip probe: per-position metric,
then mean over positions within a prompt, then mean over prompts.  The skip
probe takes maxima over positions, cutoffs and prompts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import BaselineStats, PromptRecord
from .errors import InputError
from .model import (
    EAGER,
    InterventionSpec,
    LayerTrace,
    ModelWeights,
    check_tokens,
    forward,
    head_logits,
    lens_logits,
    rope_for,
    run_layers,
)
from .tensor import Tape

KL_DIRECTIONS = ("final||layer", "layer||final")
TOP_K = 5


def _positions(n: int, positions) -> np.ndarray:
    if positions is None:
        return np.arange(n)
    pos = np.asarray(sorted(set(int(p) for p in positions)), dtype=np.int64)
    if pos.size == 0:
        raise InputError("empty position selection")
    if pos[0] < 0 or pos[-1] >= n:
        raise InputError(f"positions must lie in [0, {n}), got {pos.tolist()}")
    return pos


# ---------------------------------------------------------------------------
# residual cosine similarity
# ---------------------------------------------------------------------------


@dataclass
class CosineProfile:
    full: np.ndarray
    attn: np.ndarray
    mlp: np.ndarray
    n_positions: int
    n_prompts: int = 1

    @property
    def avg(self) -> np.ndarray:
        return (self.full + self.attn + self.mlp) / 3.0


def cosine_profile(trace: LayerTrace, positions=None) -> CosineProfile:
    """Per-layer cosine of each contribution with the residual it is added to.

    full: ``cos(a_l + m_l, h_l)``; attn: ``cos(a_l, h_l)``;
    mlp: ``cos(m_l, h_l + a_l)``.  Averaged over the selected positions.
    """
    pos = _positions(trace.n_context, positions)
    h = trace.h[:-1, pos].astype(np.float64)
    a = trace.a[:, pos].astype(np.float64)
    m = trace.m[:, pos].astype(np.float64)
    full = T.cosim_rows(a + m, h).mean(axis=1)
    attn = T.cosim_rows(a, h).mean(axis=1)
    mlp = T.cosim_rows(m, h + a).mean(axis=1)
    return CosineProfile(full, attn, mlp, int(pos.size))


def aggregate_cosine(profiles: Sequence[CosineProfile]) -> CosineProfile:
    if not profiles:
        raise InputError("no cosine profiles to aggregate")
    return CosineProfile(
        np.mean([p.full for p in profiles], axis=0),
        np.mean([p.attn for p in profiles], axis=0),
        np.mean([p.mlp for p in profiles], axis=0),
        sum(p.n_positions for p in profiles),
        sum(p.n_prompts for p in profiles),
    )


# ---------------------------------------------------------------------------
# logit lens
# ---------------------------------------------------------------------------


@dataclass
class LensProfile:
    """Entry ``l`` compares the decoded output of layer ``l`` (``h[l+1]``) with the final distribution."""

    kl: np.ndarray
    overlap: np.ndarray
    n_positions: int
    n_prompts: int = 1
    direction: str = "final||layer"


def top_k_overlap(logits_a: np.ndarray, logits_b: np.ndarray, k: int = TOP_K) -> np.ndarray:
    """``|topk(a) ∩ topk(b)| / k`` along the last axis (set semantics, ties broken by index)."""
    k = min(k, logits_a.shape[-1])
    top_a = np.argsort(-logits_a, axis=-1, kind="stable")[..., :k]
    top_b = np.argsort(-logits_b, axis=-1, kind="stable")[..., :k]
    hits = (top_a[..., :, None] == top_b[..., None, :]).any(axis=-1).sum(axis=-1)
    return hits / k


def lens_profile(trace: LayerTrace, weights: ModelWeights, positions=None, direction: str = "final||layer"):
    """KL divergence and top-5 overlap between each layer's decoded output and the final one."""
    if direction not in KL_DIRECTIONS:
        raise InputError(f"direction must be one of {KL_DIRECTIONS}")
    pos = _positions(trace.n_context, positions)
    logits = lens_logits(weights, trace.h[1:, pos])  # [L, k, V] float64
    logp = T.log_softmax(logits)
    final = logp[-1]
    if direction == "final||layer":
        kl = np.sum(np.exp(final) * (final - logp), axis=-1)
    else:
        kl = np.sum(np.exp(logp) * (logp - final), axis=-1)
    kl = np.maximum(kl, 0.0)
    overlap = top_k_overlap(logits, np.broadcast_to(logits[-1], logits.shape))
    return LensProfile(kl.mean(axis=1), overlap.mean(axis=1), int(pos.size), 1, direction)


def aggregate_lens(profiles: Sequence[LensProfile]) -> LensProfile:
    if not profiles:
        raise InputError("no lens profiles to aggregate")
    return LensProfile(
        np.mean([p.kl for p in profiles], axis=0),
        np.mean([p.overlap for p in profiles], axis=0),
        sum(p.n_positions for p in profiles),
        sum(p.n_prompts for p in profiles),
        profiles[0].direction,
    )


# ---------------------------------------------------------------------------
# layer skipping
# ---------------------------------------------------------------------------


@dataclass
class SkipEffect:
    """Effect of skipping layer ``layer`` on later contributions and the output.

    ``relative_change[i]`` belongs to layer ``later_layers[i]`` (all ``l > layer``).
    """

    layer: int
    later_layers: np.ndarray
    relative_change: np.ndarray
    output_change: float
    cutoffs: list = field(default_factory=list)


def sample_cutoffs(n_context: int, rng: np.random.Generator, count: int = 4, min_prefix: int = 1) -> list[int]:
    """Seeded cutoffs drawn uniformly from ``[min_prefix, n_context - 2]``."""
    if n_context < 2:
        raise InputError("skip probe needs at least 2 tokens")
    hi = n_context - 2
    lo = min(max(min_prefix, 0), hi)
    return sorted(int(x) for x in rng.integers(lo, hi + 1, size=count))


def _relative(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape)
    np.divide(num, den, out=out, where=den >= T.ZERO_NORM)
    return out


def skip_effect(
    weights: ModelWeights,
    tokens,
    layer: int,
    cutoffs: Sequence[int],
    base: Optional[LayerTrace] = None,
) -> SkipEffect:
    """Skip ``layer`` for positions ``<= t_s`` and measure positions ``> t_s``.

    ``r(s, l) = ||(h_{l+1} - h_l) - (hbar_{l+1} - hbar_l)|| / ||h_{l+1} - h_l||``
    maximised over cutoffs and measured positions; output change is the
    largest ``||y[t] - ybar[t]||``.
    """
    if isinstance(tokens, PromptRecord):
        tokens = tokens.tokens
    ids = check_tokens(tokens, weights.config)
    n, L = ids.size, weights.config.n_layers
    if not 0 <= layer < L:
        raise InputError(f"layer {layer} outside [0, {L})")
    if not cutoffs:
        raise InputError("no cutoffs given")
    for t_s in cutoffs:
        if not 0 <= t_s < n - 1:
            raise InputError(f"cutoff {t_s} leaves no measurable position in a {n}-token prompt")
    if base is None:
        base = forward(weights, ids)
    later = np.arange(layer + 1, L)
    delta = np.diff(base.h.astype(np.float64), axis=0)  # [L, n, d], delta[l] = h_{l+1} - h_l
    rel = np.zeros(later.size)
    out_change = 0.0
    for t_s in cutoffs:
        bar = forward(weights, ids, InterventionSpec.skip(layer, t_s))
        after = slice(t_s + 1, n)
        if later.size:
            d_bar = np.diff(bar.h.astype(np.float64), axis=0)
            num = np.linalg.norm(delta[later, after] - d_bar[later, after], axis=-1)
            den = np.linalg.norm(delta[later, after], axis=-1)
            rel = np.maximum(rel, _relative(num, den).max(axis=1))
        dy = np.linalg.norm(base.y[after].astype(np.float64) - bar.y[after].astype(np.float64), axis=-1)
        out_change = max(out_change, float(dy.max()))
    return SkipEffect(layer, later, rel, out_change, list(cutoffs))


@dataclass
class SkipSummary:
    """``relative[s, l]`` (NaN for ``l <= s``) and ``output[s]``, maxima over prompts."""

    relative: np.ndarray
    output: np.ndarray
    n_prompts: int


def aggregate_skip(per_prompt: Sequence[Sequence[SkipEffect]], n_layers: int) -> SkipSummary:
    rel = np.full((n_layers, n_layers), np.nan)
    out = np.zeros(n_layers)
    for effects in per_prompt:
        for eff in effects:
            s = eff.layer
            row = rel[s, eff.later_layers]
            rel[s, eff.later_layers] = np.fmax(row, eff.relative_change)
            out[s] = max(out[s], eff.output_change)
    return SkipSummary(rel, out, len(per_prompt))


# ---------------------------------------------------------------------------
# residual erasure
# ---------------------------------------------------------------------------


@dataclass
class ErasureMap:
    """``effect[l, t]``: largest ``||y - ybar||`` over answer predictions after erasing ``h_{l+1}[t]``."""

    effect: np.ndarray
    prompt_id: str


def _answer_positions(record: PromptRecord) -> np.ndarray:
    pos = record.prediction_positions()
    if not pos:
        raise InputError(f"record {record.id!r} has no answer span with a predicting position")
    return np.asarray(pos)


def _check_baseline(baseline: BaselineStats, weights: ModelWeights) -> None:
    cfg = weights.config
    if baseline.means.shape != (cfg.n_layers + 1, cfg.d_model):
        raise InputError(
            f"baseline has shape {baseline.means.shape}, model needs ({cfg.n_layers + 1}, {cfg.d_model})"
        )


def erasure_effect(
    weights: ModelWeights,
    record: PromptRecord,
    baseline: BaselineStats,
    base: Optional[LayerTrace] = None,
) -> ErasureMap:
    """Replace ``h_{l+1}[t]`` with the dataset mean of ``h_{l+1}`` for every ``(l, t)``.

    Each intervened pass resumes from the cached residual entering layer
    ``l+1``; everything before it is unaffected by the intervention.
    """
    pred = _answer_positions(record)
    _check_baseline(baseline, weights)
    cfg = weights.config
    ids = check_tokens(record.tokens, cfg)
    n, L = ids.size, cfg.n_layers
    if base is None:
        base = forward(weights, ids)
    rope = rope_for(cfg, n, weights.dtype)
    y_ref = base.y[pred].astype(np.float64)
    effect = np.zeros((L, n))
    rows = np.arange(n)
    for l in range(L):
        # batch entry t carries the copy of h_{l+1} with row t erased
        h = np.repeat(base.h[l + 1][None], n, axis=0)
        h[rows, rows] = baseline.layer(l + 1).astype(weights.dtype)
        h = run_layers(EAGER, weights.tensors, cfg, h, l + 1, rope)
        y = T.softmax(head_logits(EAGER, weights.tensors, cfg, h)).astype(weights.dtype)
        effect[l] = np.linalg.norm(y[:, pred].astype(np.float64) - y_ref, axis=-1).max(axis=1)
    return ErasureMap(effect, record.id)


def erasure_curve(maps: Sequence[ErasureMap]) -> np.ndarray:
    """Per-layer max over positions, averaged over prompts."""
    return np.mean([m.effect.max(axis=1) for m in maps], axis=0)


# ---------------------------------------------------------------------------
# gradient attribution
# ---------------------------------------------------------------------------


@dataclass
class AttributionMap:
    """``score[l, t]`` for residual ``h_l``, ``l = 0..L``."""

    score: np.ndarray
    variant: str
    steps: Optional[int]
    prompt_id: str


def _target(ops, logits, positions, tokens):
    return ops.sum(ops.pick(ops.log_softmax(logits), positions, tokens))


def attribution_target(weights: ModelWeights, record: PromptRecord, layer: int = 0, h_layer=None) -> float:
    """Summed log-probability of the realized answer tokens.

    With ``h_layer`` given, the residual entering layer ``layer`` is replaced
    by it (all positions) before running the remaining layers.
    """
    pred = _answer_positions(record)
    cfg = weights.config
    ids = check_tokens(record.tokens, cfg)
    if h_layer is None:
        logits = forward(weights, ids).logits[None]
    else:
        rope = rope_for(cfg, ids.size, weights.dtype)
        h = np.asarray(h_layer, dtype=weights.dtype).reshape(1, ids.size, cfg.d_model)
        h = run_layers(EAGER, weights.tensors, cfg, h, layer, rope)
        logits = head_logits(EAGER, weights.tensors, cfg, h)
    return float(_target(EAGER, logits, pred, ids[pred + 1]))


def residual_gradients(weights: ModelWeights, record: PromptRecord) -> np.ndarray:
    """``d target / d h_l`` for every layer, shape ``[L+1, n, d]``."""
    pred = _answer_positions(record)
    ids = check_tokens(record.tokens, weights.config)
    _, taped = forward(weights, ids, record_tape=True)
    tape = taped.tape
    target = _target(tape, taped.logits, pred, ids[pred + 1])
    grads = tape.backward(target, taped.h)
    return np.stack([g[0] for g in grads])


def gradient_attribution(
    weights: ModelWeights,
    record: PromptRecord,
    variant: str = "plain",
    steps: int = 32,
    baseline: Optional[BaselineStats] = None,
    base: Optional[LayerTrace] = None,
) -> AttributionMap:
    """Attribute the answer-token log-probability to every ``(layer, position)``.

    ``plain``: ``||d target / d h_l[t]||``.  ``path``: straight line from the
    baseline (zeros, or the dataset mean of ``h_l``) to ``h_l`` with
    ``steps`` midpoint evaluations; score is ``(h_l[t] - base) . mean_grad``
    and sums over ``t`` to ``target(h_l) - target(base)`` up to quadrature
    error.
    """
    if variant not in ("plain", "path"):
        raise InputError(f"unknown attribution variant {variant!r}")
    pred = _answer_positions(record)
    cfg = weights.config
    ids = check_tokens(record.tokens, cfg)
    if variant == "plain":
        grads = residual_gradients(weights, record).astype(np.float64)
        return AttributionMap(np.linalg.norm(grads, axis=-1), "plain", None, record.id)

    if steps < 1:
        raise InputError(f"steps must be >= 1, got {steps}")
    if baseline is not None:
        _check_baseline(baseline, weights)
    if base is None:
        base = forward(weights, ids)
    n, d = ids.size, cfg.d_model
    rope = rope_for(cfg, n, weights.dtype)
    alphas = ((np.arange(steps) + 0.5) / steps).astype(weights.dtype)[:, None, None]
    tokens = ids[pred + 1]
    score = np.zeros((cfg.n_layers + 1, n))
    for l in range(cfg.n_layers + 1):
        start = np.zeros(d, dtype=weights.dtype) if baseline is None else baseline.layer(l).astype(weights.dtype)
        diff = base.h[l] - start
        tape = Tape()
        path = tape.leaf(start + alphas * diff)
        h = run_layers(tape, weights.tensors, cfg, path, l, rope)
        target = _target(tape, head_logits(tape, weights.tensors, cfg, h), pred, tokens)
        (grad,) = tape.backward(target, [path])
        mean_grad = grad.astype(np.float64).mean(axis=0)
        score[l] = np.sum(diff.astype(np.float64) * mean_grad, axis=-1)
    return AttributionMap(score, "path", steps, record.id)


def attribution_curve(maps: Sequence[AttributionMap]) -> np.ndarray:
    """Per-layer total absolute score, averaged over prompts."""
    return np.mean([np.abs(m.score).sum(axis=1) for m in maps], axis=0)
