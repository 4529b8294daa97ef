"""Prompt corpora and the dataset-mean residual used by erasure and attribution."""

import json
import tempfile
from pathlib import Path

from depthscope import compute_baseline, init_random, load_jsonl, preset
from depthscope.corpus import detokenize

rows = [
    {"id": "a", "text": "2+2=", "answer": "4", "dataset": "arith"},
    {"id": "b", "text": "3+5=", "answer": "8", "dataset": "arith"},
    {"id": "c", "tokens": [0, 72, 107, 1], "dataset": "raw"},
]
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "corpus.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    corpus = load_jsonl(path, vocab_size=258)

for rec in corpus:
    span = rec.tokens[rec.answer_start : rec.answer_end] if rec.has_answer else ()
    print(f"{rec.id}: {detokenize(rec.tokens)!r:12} answer tokens {span}  predicted from {rec.prediction_positions()}")

weights = init_random(preset("tiny"), seed=0)
stats = compute_baseline(weights, corpus)
print(f"baseline over {stats.count} positions; means shape {stats.means.shape} (layers 0..L)")
