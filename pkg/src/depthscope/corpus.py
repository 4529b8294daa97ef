"""Prompt corpora, byte-level tokenization and dataset baseline residuals."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._workers import map_ordered
from .container import read_container, write_container
from .errors import FormatError, InputError
from .model import ModelWeights, forward

BOS, EOS, BYTE_OFFSET = 0, 1, 2


def byte_tokenize(text: str) -> list[int]:
    """``[BOS] + [b + 2 for each UTF-8 byte] + [EOS]``."""
    return [BOS] + [b + BYTE_OFFSET for b in text.encode("utf-8")] + [EOS]


def detokenize(tokens: Iterable[int]) -> str:
    data = bytes(t - BYTE_OFFSET for t in tokens if t not in (BOS, EOS))
    return data.decode("utf-8")


@dataclass(frozen=True)
class PromptRecord:
    id: str
    tokens: tuple
    answer_start: Optional[int] = None
    answer_end: Optional[int] = None
    dataset: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise InputError(f"record {self.id!r}: empty token sequence")
        if any(t < 0 for t in self.tokens):
            raise InputError(f"record {self.id!r}: negative token id")
        if (self.answer_start is None) != (self.answer_end is None):
            raise InputError(f"record {self.id!r}: answer_start and answer_end must be given together")
        if self.has_answer and not 0 <= self.answer_start < self.answer_end <= len(self.tokens):
            raise InputError(
                f"record {self.id!r}: answer span [{self.answer_start}, {self.answer_end}) "
                f"outside [0, {len(self.tokens)}]"
            )

    @property
    def has_answer(self) -> bool:
        return self.answer_start is not None

    def prediction_positions(self) -> list[int]:
        """Positions whose next-token distribution predicts an answer token.

        Answer token ``t`` is predicted from ``y[t-1]``, so a span starting at
        position 0 loses its first token.
        """
        if not self.has_answer:
            return []
        return [t - 1 for t in range(self.answer_start, self.answer_end) if t >= 1]

    def to_json(self) -> dict:
        out = {"id": self.id, "tokens": list(self.tokens), "dataset": self.dataset}
        if self.has_answer:
            out["answer_start"] = self.answer_start
            out["answer_end"] = self.answer_end
        return out


def record_from_json(obj: dict, vocab_size: Optional[int] = None) -> PromptRecord:
    if not isinstance(obj, dict):
        raise InputError("record is not a JSON object")
    if "id" not in obj:
        raise InputError("record has no 'id'")
    start, end = obj.get("answer_start"), obj.get("answer_end")
    if "tokens" in obj:
        tokens = obj["tokens"]
        if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
            raise InputError("'tokens' must be a list of integers")
    elif "text" in obj:
        tokens = byte_tokenize(obj["text"])
        if "answer" in obj:
            # answer bytes go right after the prompt bytes, before EOS
            answer_ids = byte_tokenize(obj["answer"])[1:-1]
            start = len(tokens) - 1
            end = start + len(answer_ids)
            tokens = tokens[:-1] + answer_ids + tokens[-1:]
    else:
        raise InputError("record needs 'tokens' or 'text'")
    if vocab_size is not None and any(t >= vocab_size for t in tokens):
        raise InputError(f"token id {max(tokens)} outside vocabulary of size {vocab_size}")
    return PromptRecord(str(obj["id"]), tokens, start, end, str(obj.get("dataset", "default")))


def load_jsonl(path, vocab_size: Optional[int] = None) -> list[PromptRecord]:
    """Read newline-delimited prompt records.

    Raises :class:`InputError` with the 1-based line number for malformed
    JSON or invalid records.  An empty file yields ``[]`` and a warning.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: line {lineno}: malformed JSON: {exc.msg}") from None
            try:
                records.append(record_from_json(obj, vocab_size))
            except InputError as exc:
                raise InputError(f"{path}: line {lineno}: {exc}") from None
    if not records:
        warnings.warn(f"{path}: corpus is empty", stacklevel=2)
    return records


def dump_jsonl(records: Sequence[PromptRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def record_seed(seed: int, record_id: str) -> np.random.Generator:
    """Per-record generator that does not depend on corpus order."""
    digest = hashlib.sha256(record_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


# ---------------------------------------------------------------------------
# baseline residual statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineStats:
    """Mean residual vector ``h_l`` for ``l = 0..L`` over a corpus.

    ``means[l]`` is the average of ``h_l``; erasure uses ``means[l+1]`` when
    replacing the residual entering layer ``l+1``.
    """

    means: np.ndarray
    count: int
    dataset: str

    @property
    def n_layers(self) -> int:
        return self.means.shape[0] - 1

    def layer(self, l: int) -> np.ndarray:
        return self.means[l]


def compute_baseline(
    weights: ModelWeights,
    corpus: Sequence[PromptRecord],
    max_positions_per_prompt: int = 64,
    seed: int = 0,
) -> BaselineStats:
    """Average every layer's residual over all (prompt, position) samples.

    Prompts longer than ``max_positions_per_prompt`` are subsampled with a
    per-record seeded draw.  Sums run in float64 in record-id order.
    """
    if not corpus:
        raise InputError("compute_baseline: empty corpus")
    if max_positions_per_prompt < 1:
        raise InputError("max_positions_per_prompt must be >= 1")
    ordered = sorted(corpus, key=lambda r: r.id)

    def accumulate(rec: PromptRecord):
        trace = forward(weights, rec.tokens)
        n = trace.n_context
        if n > max_positions_per_prompt:
            pos = np.sort(record_seed(seed, rec.id).choice(n, size=max_positions_per_prompt, replace=False))
        else:
            pos = np.arange(n)
        return trace.h[:, pos, :].astype(np.float64).sum(axis=1), pos.size

    parts = map_ordered(accumulate, ordered)
    total = np.zeros((weights.config.n_layers + 1, weights.config.d_model))
    count = 0
    for sums, k in parts:
        total += sums
        count += k
    tags = sorted({r.dataset for r in corpus})
    return BaselineStats((total / count).astype(weights.dtype), count, ",".join(tags))


def save_baseline(stats: BaselineStats, path) -> None:
    tensors = {f"baseline.layer.{l}": stats.means[l].astype(np.float32) for l in range(stats.means.shape[0])}
    write_container(path, tensors, {"baseline": {"count": stats.count, "dataset": stats.dataset}})


def load_baseline(path) -> BaselineStats:
    tensors, meta = read_container(path)
    info = meta.get("baseline")
    if not isinstance(info, dict):
        raise FormatError(f"{path}: header has no __baseline__ entry")
    layers = sorted(int(k.rsplit(".", 1)[1]) for k in tensors if k.startswith("baseline.layer."))
    if not layers or layers != list(range(len(layers))):
        raise FormatError(f"{path}: baseline layers are not contiguous from 0")
    means = np.stack([tensors[f"baseline.layer.{l}"] for l in layers])
    if means.ndim != 2:
        raise FormatError(f"{path}: baseline vectors must be 1-D")
    return BaselineStats(means, int(info.get("count", 0)), str(info.get("dataset", "")))


def corpus_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
