"""The command-line pipeline, driven from Python: init -> run -> detect -> report.

Equivalent shell session::

    depthscope init-model --preset tiny --seed 0 --out model.bin
    depthscope run --model model.bin --corpus corpus.jsonl --out curves
    depthscope detect --curves curves --out report.json
    depthscope report --report report.json --format svg --out charts
"""

import json
import tempfile
from pathlib import Path

from click.testing import CliRunner

from depthscope.cli import main

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    with open(root / "corpus.jsonl", "w") as fh:
        for i in range(6):
            fh.write(json.dumps({"id": f"p{i}", "text": f"{i}*{i}=", "answer": str(i * i), "dataset": "squares"}) + "\n")
    runner = CliRunner()
    for args in (
        ["init-model", "--preset", "tiny", "--seed", "0", "--out", root / "model.bin"],
        ["run", "--model", root / "model.bin", "--corpus", root / "corpus.jsonl", "--out", root / "curves", "--ig-steps", "16"],
        ["detect", "--curves", root / "curves", "--out", root / "report.json"],
        ["report", "--report", root / "report.json", "--format", "svg", "--out", root / "charts"],
        ["report", "--report", root / "report.json", "--format", "csv", "--out", root / "charts"],
    ):
        result = runner.invoke(main, [str(a) for a in args])
        print(f"$ depthscope {args[0]}  (exit {result.exit_code})\n{result.output}")
    print("charts:", sorted(p.name for p in (root / "charts").iterdir()))
