"""``depthscope`` command line.

Exit codes: 0 success, 1 internal error (or failed validation), 2 input
error, 3 insufficient data.
"""

from __future__ import annotations

import functools
import json
import sys
import warnings
from pathlib import Path

import click

from . import __version__
from .container import load_weights, save_weights
from .corpus import compute_baseline, load_baseline, load_jsonl, save_baseline
from .detectors import DetectorConfig
from .errors import DepthscopeError, InputError
from .model import PRESETS, init_random, preset
from .report import (
    PROBES,
    REPORT_FORMAT,
    InsufficientData,
    ProbeFailure,
    RunOptions,
    build_report,
    format_table,
    load_curve_dir,
    run_corpus,
    run_manifest,
    write_csv,
    write_json,
    write_svgs,
)
from .synthetic import validate_detectors

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_INSUFFICIENT = 0, 1, 2, 3


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except InsufficientData as exc:
            _fail(str(exc), EXIT_INSUFFICIENT)
        except ProbeFailure as exc:
            _fail(str(exc), EXIT_INPUT if isinstance(exc.error, (DepthscopeError, ValueError)) else EXIT_INTERNAL)
        except FileNotFoundError as exc:
            _fail(f"file not found: {exc.filename or exc}", EXIT_INPUT)
        except (DepthscopeError, OSError, ValueError) as exc:
            _fail(str(exc), EXIT_INPUT)
        except Exception as exc:  # noqa: BLE001 - last-resort contract
            _fail(f"internal error: {type(exc).__name__}: {exc}", EXIT_INTERNAL)

    return wrapper


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        _fail(f"{what} not found: {path}", EXIT_INPUT)


@click.group()
@click.version_option(__version__, prog_name="depthscope")
def main():
    """Profile how many layers of a pre-norm transformer do useful work."""


@main.command("init-model")
@click.option("--preset", "preset_name", type=click.Choice(sorted(PRESETS)), required=True)
@click.option("--scale-factor", type=float, default=1.0, show_default=True, help="Shrink head width, d_ff and vocab.")
@click.option("--vocab-size", type=int, default=None, help="Override the vocabulary size.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_guarded
def init_model(preset_name, scale_factor, vocab_size, seed, out):
    """Write seeded random weights for a preset shape."""
    cfg = preset(preset_name, scale_factor, vocab_size)
    save_weights(init_random(cfg, seed), out)
    click.echo(
        f"{preset_name}: L={cfg.n_layers} d_model={cfg.d_model} heads={cfg.n_q_heads}/{cfg.n_kv_heads} "
        f"d_ff={cfg.d_ff} vocab={cfg.vocab_size} -> {out}"
    )


def _probe_list(text: str) -> tuple[str, ...]:
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    if not names or text.strip() == "all":
        return PROBES
    unknown = [p for p in names if p not in PROBES]
    if unknown:
        raise click.BadParameter(f"unknown probe(s) {unknown}; choose from {list(PROBES)}")
    return names


@main.command("run")
@click.option("--model", "model_path", required=True, help="Weight container file.")
@click.option("--corpus", "corpus_path", required=True, help="JSONL prompt corpus.")
@click.option("--probes", default="all", show_default=True, help=f"Comma-separated subset of {','.join(PROBES)}.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--skip-cutoffs", type=int, default=4, show_default=True, help="Cutoffs sampled per prompt.")
@click.option("--ig-variant", type=click.Choice(["path", "plain"]), default="path", show_default=True)
@click.option("--ig-steps", type=int, default=32, show_default=True)
@click.option("--ig-baseline", type=click.Choice(["mean", "zero"]), default="mean", show_default=True)
@click.option(
    "--kl-direction", type=click.Choice(["final||layer", "layer||final"]), default="final||layer", show_default=True
)
@click.option("--baseline", "baseline_path", default=None, help="Reuse a saved baseline container.")
@click.option("--save-baseline", is_flag=True, help="Also write baseline__<dataset>.bin per dataset.")
@_guarded
def run(model_path, corpus_path, probes, seed, out_dir, skip_cutoffs, ig_variant, ig_steps, ig_baseline,
        kl_direction, baseline_path, save_baseline):
    """Run probes over a corpus and write one curve file per probe and dataset."""
    _require_file(model_path, "model file")
    _require_file(corpus_path, "corpus file")
    weights = load_weights(model_path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        records = load_jsonl(corpus_path, weights.config.vocab_size)
    if not records:
        raise InsufficientData(f"corpus {corpus_path} has no records")
    opts = RunOptions(
        probes=_probe_list(probes),
        seed=seed,
        skip_cutoffs=skip_cutoffs,
        ig_variant=ig_variant,
        ig_steps=ig_steps,
        ig_baseline=ig_baseline,
        kl_direction=kl_direction,
    )
    baseline = None
    if baseline_path is not None:
        _require_file(baseline_path, "baseline file")
        baseline = load_baseline(baseline_path)
    manifest = run_manifest(model_path, weights, corpus_path, opts)
    outputs = run_corpus(weights, records, opts, manifest, baseline)
    extra = {}
    if save_baseline:
        for dataset in sorted({r.dataset for r in records}):
            group = [r for r in records if r.dataset == dataset]
            extra[f"baseline__{dataset}.bin"] = compute_baseline(weights, group, opts.max_positions, seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(outputs):
        write_json(out / name, outputs[name])
    for name, stats in sorted(extra.items()):
        save_baseline(stats, out / name)
    click.echo(f"wrote {len(outputs) + len(extra)} files to {out}")


@main.command("detect")
@click.option("--curves", "curve_dir", required=True, help="Directory of curve files (JSON or CSV).")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--overlap-threshold", type=float, default=0.3, show_default=True)
@click.option("--kl-fraction", type=float, default=0.5, show_default=True)
@click.option("--dispersion", is_flag=True, help="Add per-prompt depth spread.")
@_guarded
def detect(curve_dir, out_path, overlap_threshold, kl_fraction, dispersion):
    """Estimate effective depth from curve files and write a report."""
    cfg = DetectorConfig(overlap_threshold, kl_fraction)
    charts, files, manifests, per_prompt = load_curve_dir(curve_dir)
    if not charts:
        raise InsufficientData(f"no curve files in {curve_dir}")
    report = build_report(charts, files, manifests, per_prompt if dispersion else None, cfg)
    write_json(out_path, report)
    click.echo(format_table(report["table"]))


@main.command("report")
@click.option("--report", "report_path", required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "svg"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guarded
def report_cmd(report_path, fmt, out_dir):
    """Export report curves as CSV or as one SVG line chart per probe."""
    _require_file(report_path, "report file")
    try:
        report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{report_path}: not JSON: {exc.msg}") from None
    if not isinstance(report, dict) or report.get("format") != REPORT_FORMAT:
        raise InputError(f"{report_path}: not a depthscope report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    charts = report.get("curves", {})
    if fmt == "csv":
        write_csv(charts, out / "curves.csv")
        click.echo(f"wrote {out / 'curves.csv'}")
    else:
        paths = write_svgs(charts, out)
        click.echo(f"wrote {len(paths)} charts to {out}")


@main.command("validate")
@click.option("--seeds", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--noise", "noise_levels", type=float, multiple=True, help="Extra noise level(s) for a sweep.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def validate(seeds, noise_levels, out_path):
    """Check detector recovery on planted traces; exit 0 iff zero-noise recovery is 1.0."""
    clean = validate_detectors(seeds)
    doc = {"tool_version": __version__, "zero_noise": clean}
    if noise_levels:
        doc["noise_sweep"] = [validate_detectors(seeds, noise_sigma=s) for s in noise_levels]
    write_json(out_path, doc)
    ok = True
    for method, stats in clean["detectors"].items():
        click.echo(f"{method:<20} recovery {stats['recovery_rate']:.3f}")
        ok &= stats["recovery_rate"] == 1.0
    for sweep in doc.get("noise_sweep", []):
        rates = ", ".join(f"{m} {s['recovery_rate']:.2f}" for m, s in sweep["detectors"].items())
        click.echo(f"noise {sweep['noise_sigma']:g}: {rates}")
    sys.exit(EXIT_OK if ok else EXIT_INTERNAL)


if __name__ == "__main__":
    main()
