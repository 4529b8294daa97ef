"""Instrumented pre-norm transformer.

Each layer ``l`` computes::

    a_l     = SelfAttention_l(RMSNorm(h_l))
    hhat_l  = h_l + a_l
    m_l     = MLP_l(RMSNorm(hhat_l))
    h_{l+1} = hhat_l + m_l

and the output head is ``y = softmax(RMSNorm(h_L) @ W_out)``.  Attention is
causal with rotary positions and grouped-query K/V sharing; the MLP is
gated (``down(silu(gate(x)) * up(x))``).  Every residual quantity is kept
in a :class:`LayerTrace`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError, ShapeError
from .tensor import EAGER, Ops, Tape

HEAD_DTYPE = np.float64


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    rope_base: float = 10000.0
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "d_ff", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise InputError(f"ModelConfig.{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_q_heads:
            raise InputError(f"d_model={self.d_model} is not divisible by n_q_heads={self.n_q_heads}")
        if self.n_q_heads % self.n_kv_heads:
            raise InputError(f"n_q_heads={self.n_q_heads} is not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_head % 2:
            raise InputError(f"d_head={self.d_head} must be even for rotary embeddings")
        if not self.rope_base > 0 or not self.eps > 0:
            raise InputError("rope_base and eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_q_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        try:
            return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})
        except TypeError as exc:
            raise InputError(f"incomplete model config: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# Layer counts and Q/KV head splits of the four Qwen-2.5 sizes; widths,
# vocabulary and rope base follow the public model configs.
PRESETS: dict[str, ModelConfig] = {
    "1.5B-shape": ModelConfig(28, 1536, 12, 2, 8960, 151936, rope_base=1e6),
    "7B-shape": ModelConfig(28, 3584, 28, 4, 18944, 152064, rope_base=1e6),
    "14B-shape": ModelConfig(48, 5120, 40, 8, 13824, 152064, rope_base=1e6),
    "32B-shape": ModelConfig(64, 5120, 40, 8, 27648, 152064, rope_base=1e6),
    "tiny": ModelConfig(8, 64, 4, 2, 176, 258),
}

MIN_VOCAB = 258  # byte tokenizer: 256 bytes + BOS + EOS


def preset(name: str, scale_factor: float = 1.0, vocab_size: Optional[int] = None) -> ModelConfig:
    """Config for a named preset, optionally shrunk for desk-scale runs.

    ``scale_factor`` shrinks the head width, ``d_ff`` and vocabulary; the
    layer count and the Q/KV head counts are kept.
    """
    try:
        base = PRESETS[name]
    except KeyError:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if not 0 < scale_factor <= 1:
        raise InputError(f"scale_factor must be in (0, 1], got {scale_factor}")
    if scale_factor == 1 and vocab_size is None:
        return base
    d_head = max(2, 2 * round(base.d_head * scale_factor / 2))
    return ModelConfig(
        n_layers=base.n_layers,
        d_model=base.n_q_heads * d_head,
        n_q_heads=base.n_q_heads,
        n_kv_heads=base.n_kv_heads,
        d_ff=max(1, round(base.d_ff * scale_factor)),
        vocab_size=vocab_size or max(MIN_VOCAB, round(base.vocab_size * scale_factor)),
        rope_base=base.rope_base,
        eps=base.eps,
    )


LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dq, dkv = cfg.d_model, cfg.n_q_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
    per_layer = {
        "attn_norm": (d,),
        "wq": (d, dq),
        "wk": (d, dkv),
        "wv": (d, dkv),
        "wo": (dq, d),
        "mlp_norm": (d,),
        "w_gate": (d, cfg.d_ff),
        "w_up": (d, cfg.d_ff),
        "w_down": (cfg.d_ff, d),
    }
    shapes = {"embed": (cfg.vocab_size, d)}
    for l in range(cfg.n_layers):
        for name in LAYER_TENSORS:
            shapes[f"layers.{l}.{name}"] = per_layer[name]
    shapes["final_norm"] = (d,)
    shapes["w_out"] = (d, cfg.vocab_size)
    return shapes


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        shapes = expected_shapes(self.config)
        missing = sorted(set(shapes) - set(self.tensors))
        if missing:
            raise ShapeError(f"missing tensor {missing[0]!r}")
        extra = sorted(set(self.tensors) - set(shapes))
        if extra:
            raise ShapeError(f"unexpected tensor {extra[0]!r}")
        dtypes = set()
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ShapeError(f"tensor {name!r} has shape {arr.shape}, config requires {shape}")
            dtypes.add(arr.dtype)
            arr.flags.writeable = False
        if len(dtypes) != 1:
            raise ShapeError(f"mixed tensor dtypes {sorted(map(str, dtypes))}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["embed"].dtype

    def astype(self, dtype) -> "ModelWeights":
        """Copy in another float dtype; ``np.float64`` is the verification mode."""
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelWeights":
        merged = dict(self.tensors)
        for name, value in updates.items():
            merged[name] = np.asarray(value, dtype=self.dtype)
        return ModelWeights(self.config, merged)

    def with_layer_silenced(self, layer: int) -> "ModelWeights":
        """Zero the attention output and MLP down projections of ``layer``."""
        wo, down = f"layers.{layer}.wo", f"layers.{layer}.w_down"
        return self.replace({wo: np.zeros_like(self[wo]), down: np.zeros_like(self[down])})


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded weights: linear maps ~ N(0, 0.02), norm scales = 1, float32."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# interventions and traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterventionSpec:
    """One residual-stream intervention applied during a forward pass.

    ``skip``: positions ``t <= position`` bypass layer ``layer`` entirely, so
    ``h[layer+1][t] = h[layer][t]``.  ``erase``: ``h[layer+1][position]`` is
    replaced with ``baseline``.
    """

    kind: str
    layer: int
    position: int
    baseline: Optional[np.ndarray] = field(default=None, compare=False)

    @classmethod
    def skip(cls, layer: int, cutoff: int) -> "InterventionSpec":
        return cls("skip", layer, cutoff)

    @classmethod
    def erase(cls, layer: int, position: int, baseline) -> "InterventionSpec":
        return cls("erase", layer, position, np.asarray(baseline))

    def validate(self, cfg: ModelConfig, n_context: int) -> None:
        if self.kind not in ("skip", "erase"):
            raise InputError(f"unknown intervention kind {self.kind!r}")
        if not 0 <= self.layer < cfg.n_layers:
            raise InputError(f"intervention layer {self.layer} outside [0, {cfg.n_layers})")
        if not 0 <= self.position < n_context:
            raise InputError(f"intervention position {self.position} outside [0, {n_context})")
        if self.kind == "erase":
            if self.baseline is None or self.baseline.shape != (cfg.d_model,):
                shape = None if self.baseline is None else self.baseline.shape
                raise InputError(f"erase baseline must have shape ({cfg.d_model},), got {shape}")


@dataclass
class LayerTrace:
    """Residual-stream snapshots of one forward pass.

    ``h`` is ``[L+1, n, d]`` (``h[0]`` is the embedding output); ``a``,
    ``hhat`` and ``m`` are ``[L, n, d]``; ``logits`` (float64) and ``y`` are
    ``[n, |V|]``.
    """

    tokens: np.ndarray
    h: np.ndarray
    a: np.ndarray
    hhat: np.ndarray
    m: np.ndarray
    logits: np.ndarray
    y: np.ndarray
    intervention: Optional[InterventionSpec] = None

    @property
    def n_layers(self) -> int:
        return self.a.shape[0]

    @property
    def n_context(self) -> int:
        return self.h.shape[1]


@dataclass
class TapedForward:
    """Tape handles produced by ``forward(..., record_tape=True)``."""

    tape: Tape
    params: dict
    h: list
    logits: object


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token sequence must be a nonempty 1-D sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        i = int(np.argmax(bad))
        raise InputError(f"token id {int(ids[i])} at position {i} outside vocabulary of size {cfg.vocab_size}")
    return ids.astype(np.int64)


def _attention(ops: Ops, p, cfg: ModelConfig, l: int, x, rope):
    B, n = ops.value(x).shape[:2]
    hq, hkv, dh = cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head
    cos, sin = rope

    def heads(proj, count):
        y = ops.matmul(x, p[f"layers.{l}.{proj}"])
        return ops.transpose(ops.reshape(y, (B, n, count, dh)), (0, 2, 1, 3))

    q = ops.rotary(heads("wq", hq), cos, sin)
    k = ops.rotary(heads("wk", hkv), cos, sin)
    v = heads("wv", hkv)
    k = ops.repeat(k, hq // hkv, axis=1)
    v = ops.repeat(v, hq // hkv, axis=1)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = ops.softmax(ops.causal_mask(scores))
    out = ops.matmul(probs, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, n, hq * dh))
    return ops.matmul(out, p[f"layers.{l}.wo"])


def _mlp(ops: Ops, p, l: int, x):
    gate = ops.silu(ops.matmul(x, p[f"layers.{l}.w_gate"]))
    up = ops.matmul(x, p[f"layers.{l}.w_up"])
    return ops.matmul(ops.mul(gate, up), p[f"layers.{l}.w_down"])


def layer_step(ops: Ops, p, cfg: ModelConfig, l: int, h, rope):
    """One pre-norm layer; returns ``(a, hhat, m, h_next)``."""
    a = _attention(ops, p, cfg, l, ops.rmsnorm(h, p[f"layers.{l}.attn_norm"], cfg.eps), rope)
    hhat = ops.add(h, a)
    m = _mlp(ops, p, l, ops.rmsnorm(hhat, p[f"layers.{l}.mlp_norm"], cfg.eps))
    return a, hhat, m, ops.add(hhat, m)


def head_logits(ops: Ops, p, cfg: ModelConfig, h):
    """Final norm then ``W_out``; the projection runs in float64."""
    x = ops.cast(ops.rmsnorm(h, p["final_norm"], cfg.eps), HEAD_DTYPE)
    return ops.matmul(x, ops.cast(p["w_out"], HEAD_DTYPE))


def apply_intervention(ops: Ops, spec: Optional[InterventionSpec], l: int, h_in, h_out):
    """Residual entering layer ``l+1`` after the intervention (if it targets layer ``l``)."""
    if spec is None or spec.layer != l:
        return h_out
    if spec.kind == "skip":
        return ops.blend_rows(h_out, h_in, np.arange(spec.position + 1))
    baseline = spec.baseline.astype(ops.value(h_out).dtype)
    return ops.replace_rows(h_out, baseline, [spec.position])


def run_layers(ops: Ops, p, cfg: ModelConfig, h, start: int, rope, intervention=None, record=None):
    """Run layers ``start..L-1`` from residual ``h`` (shape ``[B, n, d]``).

    ``record`` (a dict of lists) collects ``a``, ``hhat``, ``m`` and ``h``.
    Returns the final residual.
    """
    for l in range(start, cfg.n_layers):
        a, hhat, m, h_next = layer_step(ops, p, cfg, l, h, rope)
        h_next = apply_intervention(ops, intervention, l, h, h_next)
        if record is not None:
            record["a"].append(a)
            record["hhat"].append(hhat)
            record["m"].append(m)
            record["h"].append(h_next)
        h = h_next
    return h


def rope_for(cfg: ModelConfig, n: int, dtype):
    return T.rotary_tables(n, cfg.d_head, cfg.rope_base, dtype)


def forward(
    weights: ModelWeights,
    tokens: Sequence[int],
    intervention: Optional[InterventionSpec] = None,
    record_tape: bool = False,
):
    """Run the model on one sequence and capture every residual state.

    Returns a :class:`LayerTrace`, or ``(trace, TapedForward)`` when
    ``record_tape`` is set; the taped pass evaluates the same kernels and
    yields identical values.
    """
    cfg = weights.config
    ids = check_tokens(tokens, cfg)
    n = ids.size
    if intervention is not None:
        intervention.validate(cfg, n)

    if record_tape:
        ops: Ops = Tape()
        p = {name: ops.leaf(arr) for name, arr in weights.tensors.items()}
    else:
        ops = EAGER
        p = weights.tensors
    rope = rope_for(cfg, n, weights.dtype)

    h0 = ops.reshape(ops.embed(p["embed"], ids), (1, n, cfg.d_model))
    record = {"a": [], "hhat": [], "m": [], "h": [h0]}
    h_last = run_layers(ops, p, cfg, h0, 0, rope, intervention, record)
    logits = head_logits(ops, p, cfg, h_last)
    probs = ops.softmax(logits)

    val = ops.value
    trace = LayerTrace(
        tokens=ids,
        h=np.stack([val(x)[0] for x in record["h"]]),
        a=np.stack([val(x)[0] for x in record["a"]]),
        hhat=np.stack([val(x)[0] for x in record["hhat"]]),
        m=np.stack([val(x)[0] for x in record["m"]]),
        logits=val(logits)[0],
        y=val(probs)[0].astype(weights.dtype),
        intervention=intervention,
    )
    if record_tape:
        return trace, TapedForward(ops, p, record["h"], logits)
    return trace


def decode_lens(weights: ModelWeights, h: np.ndarray) -> np.ndarray:
    """Early output distribution for residual state(s) ``h[..., d_model]``."""
    h = np.asarray(h, dtype=weights.dtype)
    if h.shape[-1] != weights.config.d_model:
        raise ShapeError(f"decode_lens: expected last dim {weights.config.d_model}, got {h.shape}")
    return T.softmax(lens_logits(weights, h)).astype(weights.dtype)


def lens_logits(weights: ModelWeights, h: np.ndarray) -> np.ndarray:
    """Float64 logits of ``h[..., d_model]`` through the final norm and ``W_out``."""
    h = np.asarray(h, dtype=weights.dtype)
    squeeze = h.ndim == 1
    x = h[None, None] if squeeze else h
    x = x.reshape(-1, x.shape[-2], x.shape[-1]) if x.ndim >= 2 else x
    logits = head_logits(EAGER, weights.tensors, weights.config, x)
    return logits[0, 0] if squeeze else logits.reshape(h.shape[:-1] + (weights.config.vocab_size,))
