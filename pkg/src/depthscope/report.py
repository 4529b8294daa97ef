"""Probe runs over corpora, curve files, effective-depth reports and charts.

File formats
------------
curve file (``<probe>__<dataset>.json``)
    ``{"format", "probe", "dataset", "n_layers", "n_prompts", "params",
    "curves": {name: [value per layer]}, "maps", "per_prompt", "manifest"}``
report (``report.json``)
    ``{"format", "manifest", "curves": {chart: {"<dataset>/<name>": [...]}},
    "table": [cell, ...], "dispersion"}``
CSV
    columns ``probe,series,layer,value``; ``value`` is empty for undefined points.

All JSON is written with sorted keys and floats rounded to 9 significant
digits so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from ._workers import map_ordered
from .corpus import BaselineStats, PromptRecord, compute_baseline, record_seed
from .detectors import COSINE, KL, METHODS, OVERLAP, DetectorConfig, ed_from_cosine, ed_from_kl, ed_from_overlap
from .errors import InputError
from .model import ModelWeights, forward
from .probes import (
    aggregate_cosine,
    aggregate_lens,
    aggregate_skip,
    attribution_curve,
    cosine_profile,
    erasure_curve,
    erasure_effect,
    gradient_attribution,
    lens_profile,
    sample_cutoffs,
    skip_effect,
)

PROBES = ("cosine", "lens", "skip", "erasure", "attribution")
CURVE_FORMAT = "depthscope.curves/1"
REPORT_FORMAT = "depthscope.report/1"
CSV_COLUMNS = ("probe", "series", "layer", "value")

# curve-file probe -> {chart name: curve name}
CHARTS = {
    "cosine": {"cosine": ("full", "attn", "mlp", "avg")},
    "lens": {"lens_kl": ("kl",), "lens_overlap": ("overlap",)},
    "skip": {"skip_output": ("output_change",), "skip_later": ("max_relative_change",)},
    "erasure": {"erasure": ("max_effect",)},
    "attribution": {"attribution": ("total_abs_score",)},
}
DETECTOR_INPUTS = {COSINE: ("cosine", "avg"), KL: ("lens_kl", "kl"), OVERLAP: ("lens_overlap", "overlap")}


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.9g}")
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# probe runs
# ---------------------------------------------------------------------------


@dataclass
class RunOptions:
    probes: Sequence[str] = PROBES
    seed: int = 0
    skip_cutoffs: int = 4
    skip_min_prefix: int = 1
    ig_variant: str = "path"
    ig_steps: int = 32
    ig_baseline: str = "mean"
    kl_direction: str = "final||layer"
    max_positions: int = 64

    def params(self) -> dict:
        return {
            "skip_cutoffs": self.skip_cutoffs,
            "skip_min_prefix": self.skip_min_prefix,
            "ig_variant": self.ig_variant,
            "ig_steps": self.ig_steps,
            "ig_baseline": self.ig_baseline,
            "kl_direction": self.kl_direction,
            "baseline_max_positions": self.max_positions,
        }


class ProbeFailure(Exception):
    def __init__(self, probe: str, error: Exception):
        super().__init__(f"probe {probe!r} failed: {error}")
        self.probe = probe
        self.error = error


def _answered(records):
    out = [r for r in records if r.prediction_positions()]
    if not out:
        raise InputError("no record has an answer span with a predicting position")
    return out


def run_probe(
    probe: str,
    weights: ModelWeights,
    records: Sequence[PromptRecord],
    opts: RunOptions,
    traces: dict,
    baseline: Optional[BaselineStats],
) -> dict:
    """Run one probe over ``records`` and return the curve-file payload (without manifest)."""
    L = weights.config.n_layers
    if probe == "cosine":
        profiles = map_ordered(lambda r: cosine_profile(traces[r.id]), records)
        agg = aggregate_cosine(profiles)
        curves = {"full": agg.full, "attn": agg.attn, "mlp": agg.mlp, "avg": agg.avg}
        per_prompt = {r.id: {"avg": p.avg} for r, p in zip(records, profiles)}
        return {"curves": curves, "per_prompt": per_prompt, "n_prompts": agg.n_prompts}
    if probe == "lens":
        def one(r):
            return lens_profile(traces[r.id], weights, r.prediction_positions() or None, opts.kl_direction)

        profiles = map_ordered(one, records)
        agg = aggregate_lens(profiles)
        per_prompt = {r.id: {"kl": p.kl, "overlap": p.overlap} for r, p in zip(records, profiles)}
        return {
            "curves": {"kl": agg.kl, "overlap": agg.overlap},
            "per_prompt": per_prompt,
            "n_prompts": agg.n_prompts,
        }
    if probe == "skip":
        usable = [r for r in records if len(r.tokens) >= 2]
        if not usable:
            raise InputError("skip probe needs prompts with at least 2 tokens")

        def one(r):
            cutoffs = sample_cutoffs(len(r.tokens), record_seed(opts.seed, r.id), opts.skip_cutoffs, opts.skip_min_prefix)
            return [skip_effect(weights, r, s, cutoffs, traces[r.id]) for s in range(L)]

        summary = aggregate_skip(map_ordered(one, usable), L)
        later = np.array([np.nanmax(row) if np.any(np.isfinite(row)) else np.nan for row in summary.relative])
        return {
            "curves": {"output_change": summary.output, "max_relative_change": later},
            "maps": {"relative_change": summary.relative},
            "n_prompts": summary.n_prompts,
        }
    if probe == "erasure":
        usable = _answered(records)
        maps = map_ordered(lambda r: erasure_effect(weights, r, baseline, traces[r.id]), usable)
        return {
            "curves": {"max_effect": erasure_curve(maps)},
            "maps": {m.prompt_id: m.effect for m in maps},
            "n_prompts": len(maps),
        }
    if probe == "attribution":
        usable = _answered(records)
        ig_base = baseline if opts.ig_baseline == "mean" else None

        def one(r):
            return gradient_attribution(weights, r, opts.ig_variant, opts.ig_steps, ig_base, traces[r.id])

        maps = map_ordered(one, usable)
        return {
            "curves": {"total_abs_score": attribution_curve(maps)},
            "maps": {m.prompt_id: m.score for m in maps},
            "n_prompts": len(maps),
        }
    raise InputError(f"unknown probe {probe!r}; choose from {PROBES}")


def run_corpus(
    weights: ModelWeights,
    records: Sequence[PromptRecord],
    opts: RunOptions,
    manifest: dict,
    baseline: Optional[BaselineStats] = None,
) -> dict[str, dict]:
    """All requested probes for every dataset tag; returns ``{filename: payload}``."""
    for probe in opts.probes:
        if probe not in PROBES:
            raise InputError(f"unknown probe {probe!r}; choose from {PROBES}")
    if opts.ig_baseline not in ("mean", "zero"):
        raise InputError(f"ig baseline must be 'mean' or 'zero', got {opts.ig_baseline!r}")
    if not records:
        raise InputError("corpus is empty")
    outputs = {}
    datasets = sorted({r.dataset for r in records})
    for dataset in datasets:
        group = sorted((r for r in records if r.dataset == dataset), key=lambda r: r.id)
        traces = dict(zip((r.id for r in group), map_ordered(lambda r: forward(weights, r.tokens), group)))
        stats = baseline
        needs_baseline = "erasure" in opts.probes or ("attribution" in opts.probes and opts.ig_baseline == "mean")
        if stats is None and needs_baseline:
            stats = compute_baseline(weights, group, opts.max_positions, opts.seed)
        for probe in opts.probes:
            try:
                payload = run_probe(probe, weights, group, opts, traces, stats)
            except Exception as exc:  # reported per probe by the CLI
                raise ProbeFailure(probe, exc) from exc
            payload.update(
                {
                    "format": CURVE_FORMAT,
                    "probe": probe,
                    "dataset": dataset,
                    "n_layers": weights.config.n_layers,
                    "params": opts.params(),
                    "manifest": manifest,
                }
            )
            outputs[f"{probe}__{dataset}.json"] = payload
    return outputs


def run_manifest(model_path, weights: ModelWeights, corpus_path, opts: RunOptions) -> dict:
    return {
        "tool_version": __version__,
        "model": {"path": str(model_path), "sha256": sha256_file(model_path), "config_digest": weights.config.digest()},
        "corpus": {"path": str(corpus_path), "sha256": sha256_file(corpus_path)},
        "probes": list(opts.probes),
        "params": opts.params(),
        "seed": opts.seed,
    }


# ---------------------------------------------------------------------------
# curve parsing and detection
# ---------------------------------------------------------------------------


def charts_from_curve_file(payload: dict) -> dict:
    """Curve-file payload -> ``{chart: {"<dataset>/<name>": values}}``."""
    probe, dataset = payload.get("probe"), payload.get("dataset")
    if probe not in CHARTS or not isinstance(dataset, str):
        raise InputError(f"not a curve file (probe={probe!r})")
    curves = payload.get("curves", {})
    out: dict = {}
    for chart, names in CHARTS[probe].items():
        for name in names:
            if name in curves:
                out.setdefault(chart, {})[f"{dataset}/{name}"] = list(curves[name])
    return out


def read_csv_curves(path) -> dict:
    """Inverse of :func:`write_csv`."""
    rows: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise InputError(f"{path}: expected CSV header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise InputError(f"{path}: line {lineno}: expected 4 columns")
            chart, series, layer, value = row
            try:
                point = (int(layer), None if value == "" else float(value))
            except ValueError:
                raise InputError(f"{path}: line {lineno}: bad layer or value") from None
            rows.setdefault(chart, {}).setdefault(series, []).append(point)
    charts: dict = {}
    for chart, series_map in rows.items():
        charts[chart] = {}
        for series, points in series_map.items():
            points.sort()
            if [p[0] for p in points] != list(range(len(points))):
                raise InputError(f"{path}: series {chart}/{series} has missing or duplicate layers")
            charts[chart][series] = [p[1] for p in points]
    return charts


def write_csv(charts: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for chart in sorted(charts):
            for series in sorted(charts[chart]):
                for layer, value in enumerate(charts[chart][series]):
                    writer.writerow([chart, series, layer, "" if value is None else repr(float(value))])


def merge_charts(target: dict, extra: dict) -> None:
    for chart, series_map in extra.items():
        dest = target.setdefault(chart, {})
        for series, values in series_map.items():
            if series in dest and dest[series] != values:
                raise InputError(f"conflicting curves for {chart}/{series}")
            dest[series] = values


def load_curve_dir(curve_dir) -> tuple[dict, list, list, dict]:
    """Read every curve file (``*.json``) and CSV export (``*.csv``) in a directory.

    Returns ``(charts, file digests, run manifests, per-prompt curves)``.
    """
    root = Path(curve_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"curve directory not found: {curve_dir}")
    charts: dict = {}
    files, manifests, per_prompt = [], [], {}
    for path in sorted(root.iterdir()):
        if path.suffix == ".json":
            try:
                payload = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                continue
            if not isinstance(payload, dict) or payload.get("format") != CURVE_FORMAT:
                continue
            merge_charts(charts, _plain(charts_from_curve_file(payload)))
            if payload.get("manifest") and payload["manifest"] not in manifests:
                manifests.append(payload["manifest"])
            if payload.get("per_prompt"):
                per_prompt.setdefault(payload["dataset"], {}).setdefault(payload["probe"], payload["per_prompt"])
        elif path.suffix == ".csv":
            merge_charts(charts, read_csv_curves(path))
        else:
            continue
        files.append({"name": path.name, "sha256": sha256_file(path)})
    return charts, files, manifests, per_prompt


def _series_curve(charts, chart, dataset, name):
    values = charts.get(chart, {}).get(f"{dataset}/{name}")
    if not values or any(v is None for v in values):
        return None
    return values


def datasets_in(charts: dict) -> list[str]:
    return sorted({series.rsplit("/", 1)[0] for series_map in charts.values() for series in series_map})


def detect_table(charts: dict, cfg: DetectorConfig = DetectorConfig()) -> list[dict]:
    """Method x dataset grid of depth estimates; cells without input are marked absent."""
    detectors = {
        COSINE: lambda c: ed_from_cosine(c),
        KL: lambda c: ed_from_kl(c, None, cfg),
        OVERLAP: lambda c: ed_from_overlap(c, None, cfg),
    }
    table = []
    for dataset in datasets_in(charts):
        for method in METHODS:
            chart, name = DETECTOR_INPUTS[method]
            curve = _series_curve(charts, chart, dataset, name)
            if curve is None:
                table.append({"method": method, "dataset": dataset, "absent": True})
                continue
            cell = detectors[method](curve).to_json()
            cell.update({"dataset": dataset, "absent": False})
            table.append(cell)
    return table


def dispersion(per_prompt: dict, cfg: DetectorConfig = DetectorConfig()) -> dict:
    """Spread of per-prompt effective depths."""
    out = {}
    for dataset, probes in sorted(per_prompt.items()):
        eds: dict = {}
        for curves in probes.get("cosine", {}).values():
            eds.setdefault(COSINE, []).append(ed_from_cosine(curves["avg"]).ed)
        for curves in probes.get("lens", {}).values():
            eds.setdefault(KL, []).append(ed_from_kl(curves["kl"], None, cfg).ed)
            eds.setdefault(OVERLAP, []).append(ed_from_overlap(curves["overlap"], None, cfg).ed)
        out[dataset] = {
            method: {
                "n": len(v),
                "mean": float(np.mean(v)),
                "std": float(np.std(v)),
                "min": int(np.min(v)),
                "max": int(np.max(v)),
            }
            for method, v in sorted(eds.items())
        }
    return out


def build_report(charts, files, manifests, per_prompt=None, cfg: DetectorConfig = DetectorConfig()) -> dict:
    table = detect_table(charts, cfg)
    if not any(not cell["absent"] for cell in table):
        raise InsufficientData("no usable detector input curves")
    report = {
        "format": REPORT_FORMAT,
        "manifest": {"tool_version": __version__, "curve_files": files, "runs": manifests},
        "detector_config": {"overlap_threshold": cfg.overlap_threshold, "kl_fraction": cfg.kl_fraction},
        "curves": charts,
        "table": table,
    }
    if per_prompt is not None:
        report["dispersion"] = dispersion(per_prompt, cfg)
    return report


class InsufficientData(Exception):
    pass


def format_table(table: list[dict]) -> str:
    """Human-readable ED / ratio grid with two-decimal ratios."""
    lines = [f"{'dataset':<16} " + " ".join(f"{m:>22}" for m in METHODS)]
    for dataset in sorted({c["dataset"] for c in table}):
        cells = []
        for method in METHODS:
            cell = next(c for c in table if c["dataset"] == dataset and c["method"] == method)
            text = "absent" if cell["absent"] else f"{cell['ed']} / {cell['ratio']:.2f}"
            cells.append(f"{text:>22}")
        lines.append(f"{dataset:<16} " + " ".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------

CHART_LABELS = {
    "cosine": "cosine similarity",
    "lens_kl": "KL divergence (nats)",
    "lens_overlap": "top-5 overlap",
    "skip_output": "max ||y - y_skip||",
    "skip_later": "max relative change",
    "erasure": "max ||y - y_erased||",
    "attribution": "total |attribution|",
}


def write_svgs(charts: dict, out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "depthscope"
    out_dir = Path(out_dir)
    written = []
    for chart in sorted(charts):
        fig, ax = plt.subplots(figsize=(6, 4))
        drawn = False
        for series, values in sorted(charts[chart].items()):
            pts = [(i, v) for i, v in enumerate(values) if v is not None]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", markersize=3, label=series)
                drawn = True
        if drawn:
            ax.legend(fontsize=7)
        else:
            ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel("layer index")
        ax.set_ylabel(CHART_LABELS.get(chart, chart))
        ax.set_title(chart)
        path = out_dir / f"{chart}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
