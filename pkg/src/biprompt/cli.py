"""Command-line experiment runner.

``biprompt run`` evaluates each configured method on a benchmark and writes
per-example results, a delimited summary and an aligned text table.
``biprompt sweep`` repeats that over a hyperparameter grid. ``biprompt
generate`` exports the synthetic benchmark as an image directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .adapt import METHODS, AdaptationConfig, AdaptationTrace, adapt_sample, adapt_stream
from .config import ConfigError, ExperimentConfig, load_config
from .core import BiPromptError, argmax_lowest
from .debias import PromptSet, save_prompt_state
from .encoders import (
    ConvEncoder,
    HashTextEncoder,
    PlantedBiasEncoder,
    TorchModuleEncoder,
    VisualEncoder,
    encode_class_prompts,
)
from .evalbench import (
    GroupedExample,
    average_accuracy,
    conditional_mutual_information,
    export_dataset,
    generate_dataset,
    load_dataset,
    prototypes,
    worst_group_accuracy,
)

WORKERS_ENV = "BIPROMPT_WORKERS"
EXIT_OK, EXIT_FAILURES, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
LOSS_TERMS = ("total", "ce", "bse", "kl_fg", "cos_bg", "kl_erased", "ent")
RESULT_FIELDS = ("method", "id", "class_label", "spurious_label", "group", "predicted",
                 "correct", "alpha", "fallback", "error") + tuple(f"loss_{t}" for t in LOSS_TERMS)
SUMMARY_FIELDS = ("method", "n", "avg", "wg", "worst_group", "mean_alpha") \
    + tuple(f"mean_loss_{t}" for t in LOSS_TERMS) + ("cmi_before", "cmi_after", "fallbacks", "errors")


class DatasetError(BiPromptError):
    pass


@dataclass
class ExampleResult:
    example: GroupedExample
    predicted: int
    alpha: float
    losses: dict[str, float] = field(default_factory=dict)
    fallback: bool = False
    error: str = ""
    trace: Optional[AdaptationTrace] = None
    state: Optional[PromptSet] = None


@dataclass
class RunReport:
    out: Path
    summary: list[dict[str, object]]
    exit_code: int


def fmt(x: object) -> str:
    """Round-trippable text for a CSV cell."""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


def build_encoders(cfg: ExperimentConfig) -> tuple[VisualEncoder, "np.ndarray"]:
    ec, ds = cfg.encoder, cfg.dataset
    text = HashTextEncoder(embed_dim=ec.embed_dim, seed=ec.text_seed)
    prompts = encode_class_prompts(text, ds.class_names, ds.template)
    if ec.variant == "planted_bias":
        objs, bgs = prototypes(ds.spec)
        enc = PlantedBiasEncoder(prompts, objs, bgs, object_gain=ec.object_gain,
                                 context_gain=ec.context_gain, objectness=ec.objectness, seed=ec.seed)
    elif ec.variant == "conv":
        enc = ConvEncoder(embed_dim=ec.embed_dim, seed=ec.seed)
    else:
        enc = TorchModuleEncoder.from_checkpoint(ec.checkpoint, embed_dim=ec.embed_dim)
    return enc, prompts


def load_examples(cfg: ExperimentConfig) -> list[GroupedExample]:
    ds = cfg.dataset
    try:
        if ds.directory is None:
            examples = generate_dataset(ds.spec, ds.n)
        else:
            examples = load_dataset(ds.directory)
    except (BiPromptError, OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"cannot load dataset: {exc}") from exc
    C = len(ds.class_names)
    bad = [e.example_id for e in examples if e.class_label >= C]
    if bad:
        raise DatasetError(f"class labels outside the {C} configured class names (ids {bad[:5]})")
    ids = [e.example_id for e in examples]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate example ids")
    return sorted(examples, key=lambda e: e.example_id)


def _result(ex: GroupedExample, pred, trace: AdaptationTrace, state: PromptSet) -> ExampleResult:
    last = trace.records[-1] if trace.records else None
    return ExampleResult(ex, argmax_lowest(pred), state.alpha, last.losses if last else {},
                         trace.failed, trace.error, trace, state)


def _adapt_one(ex: GroupedExample, ps: PromptSet, enc: VisualEncoder, acfg: AdaptationConfig) -> ExampleResult:
    try:
        pred, trace, state = adapt_sample(ex.image, ps, enc, acfg)
    except Exception as exc:  # counted against the failure tolerance
        return ExampleResult(ex, -1, float("nan"), error=f"{type(exc).__name__}: {exc}")
    return _result(ex, pred, trace, state)


def run_method(examples: Sequence[GroupedExample], ps: PromptSet, enc: VisualEncoder,
               acfg: AdaptationConfig, workers: int = 1) -> list[ExampleResult]:
    """Results in example order; episodic runs are spread over ``workers`` threads."""
    if not acfg.episodic:
        stream = adapt_stream((e.image for e in examples), ps, enc, acfg)
        return [_result(ex, *out) for ex, out in zip(examples, stream)]
    if workers <= 1:
        return [_adapt_one(ex, ps, enc, acfg) for ex in examples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ex: _adapt_one(ex, ps, enc, acfg), examples))


def summarize(method: str, results: Sequence[ExampleResult], baseline: Sequence[int]) -> dict[str, object]:
    examples = [r.example for r in results]
    preds = [r.predicted for r in results]
    wg, worst = worst_group_accuracy(preds, examples)
    spurious = [e.spurious_label for e in examples]
    causal = [e.class_label for e in examples]
    row: dict[str, object] = {
        "method": method,
        "n": len(results),
        "avg": average_accuracy(preds, examples),
        "wg": wg,
        "worst_group": worst,
        "mean_alpha": float(np.mean([r.alpha for r in results])),
    }
    for t in LOSS_TERMS:
        vals = [r.losses[t] for r in results if t in r.losses]
        row[f"mean_loss_{t}"] = float(np.mean(vals)) if vals else None
    row["cmi_before"] = conditional_mutual_information(spurious, baseline, causal)
    row["cmi_after"] = conditional_mutual_information(spurious, preds, causal)
    row["fallbacks"] = sum(r.fallback for r in results)
    row["errors"] = sum(bool(r.error) and not r.fallback for r in results)
    return row


def _pct(x: object) -> str:
    return "-" if x is None else f"{100.0 * float(x):.1f}"


def _num(x: object) -> str:
    return "-" if x is None else f"{float(x):.4f}"


def render_table(rows: Sequence[dict[str, object]], key_columns: Sequence[str] = ("method",),
                 marker: Optional[int] = None) -> str:
    """Aligned plain-text table with AVG. and W.G. in percent."""
    head = [c if c != "method" else "Method" for c in key_columns] + [
        "AVG.", "W.G.", "mean α", "CMI before", "CMI after", "loss", "CE", "BSE", "ent"]
    body = []
    for i, r in enumerate(rows):
        body.append([fmt(r[c]) for c in key_columns] + [
            _pct(r["avg"]), _pct(r["wg"]), _num(r["mean_alpha"]), _num(r["cmi_before"]),
            _num(r["cmi_after"]), _num(r["mean_loss_total"]), _num(r["mean_loss_ce"]),
            _num(r["mean_loss_bse"]), _num(r["mean_loss_ent"])])
        if marker is not None:
            body[-1].append("*" if i == marker else "")
    if marker is not None:
        head.append("best")
    widths = [max(len(row[j]) for row in [head] + body) for j in range(len(head))]
    lines = []
    for k, row in enumerate([head] + body):
        cells = [c.ljust(w) if j < len(key_columns) else c.rjust(w)
                 for j, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict[str, object]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([fmt(r.get(f)) for f in fields])
    path.write_text(buf.getvalue())


def _result_rows(method: str, results: Sequence[ExampleResult]) -> list[dict[str, object]]:
    rows = []
    for r in results:
        e = r.example
        row: dict[str, object] = {
            "method": method, "id": e.example_id, "class_label": e.class_label,
            "spurious_label": e.spurious_label, "group": e.group, "predicted": r.predicted,
            "correct": r.predicted == e.class_label, "alpha": r.alpha, "fallback": r.fallback,
            "error": r.error,
        }
        row.update({f"loss_{t}": r.losses.get(t) for t in LOSS_TERMS})
        rows.append(row)
    return rows


def _trace_lines(method: str, results: Sequence[ExampleResult]) -> list[str]:
    lines = []
    for r in results:
        for rec in (r.trace.records if r.trace else []):
            lines.append(json.dumps({"method": method, "id": r.example.example_id, "step": rec.step,
                                     "alpha": rec.alpha, "entropy": rec.entropy, "losses": rec.losses},
                                    sort_keys=True))
    return lines


def _dump_attention(directory: Path, results: Sequence[ExampleResult]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for r in results:
        if r.trace is not None and r.trace.attention is not None:
            Image.fromarray(r.trace.attention.to_uint8(), mode="L").save(
                directory / f"{r.example.example_id}.png")


def resolve_workers(cfg: ExperimentConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env is None or env.strip() == "":
        return cfg.report.workers
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {env!r}", source="environment")
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {env!r}", source="environment")
    return n


def run_experiment(cfg: ExperimentConfig, dump_attention: Optional[Path] = None,
                   examples: Optional[list[GroupedExample]] = None) -> RunReport:
    """Evaluate every configured method and write the report files into ``cfg.report.out``.

    Files: ``results.csv`` (one row per method and example), ``summary.csv``,
    ``summary.txt`` and ``trace.jsonl`` (one record per adaptation step).
    Raises :class:`DatasetError` when the benchmark cannot be loaded.
    """
    workers = resolve_workers(cfg)
    if examples is None:
        examples = load_examples(cfg)
    enc, prompts = build_encoders(cfg)
    ps = PromptSet(prompts, alpha0=cfg.alpha0)
    out = Path(cfg.report.out)
    out.mkdir(parents=True, exist_ok=True)

    vanilla = run_method(examples, ps, enc, replace(cfg.adaptation, method="vanilla"), workers=1)
    baseline = [r.predicted for r in vanilla]
    summary, result_rows, trace_lines = [], [], []
    exit_code = EXIT_OK
    for method in cfg.methods:
        acfg = replace(cfg.adaptation, method=method)
        results = vanilla if method == "vanilla" else run_method(examples, ps, enc, acfg, workers)
        errors = sum(bool(r.error) and not r.fallback for r in results)
        if errors > cfg.report.failure_tolerance * len(results):
            exit_code = EXIT_FAILURES
        summary.append(summarize(method, results, baseline))
        result_rows += _result_rows(method, results)
        trace_lines += _trace_lines(method, results)
        if dump_attention is not None and method == "biprompt":
            _dump_attention(Path(dump_attention), results)
        if cfg.report.save_states:
            states = out / "states" / method
            states.mkdir(parents=True, exist_ok=True)
            for r in results:
                if r.state is not None:
                    save_prompt_state(r.state, states / f"{r.example.example_id}.bpps")

    _write_csv(out / "results.csv", RESULT_FIELDS, result_rows)
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    (out / "summary.txt").write_text(render_table(summary))
    (out / "trace.jsonl").write_text("".join(line + "\n" for line in trace_lines))
    return RunReport(out, summary, exit_code)


def sweep(cfg: ExperimentConfig, grid: Optional[Sequence[dict[str, object]]] = None) -> RunReport:
    """Run every grid point into ``out/point_NNN`` and write ``sweep.csv``/``sweep.txt``.

    The best row (highest W.G. among adapting methods, first on ties) is
    marked in both files.
    """
    grid = cfg.grid() if grid is None else list(grid)
    if not grid:
        raise BiPromptError("sweep grid is empty")
    keys = list(dict.fromkeys(k for point in grid for k in point))
    examples = load_examples(cfg)
    out = Path(cfg.report.out)
    rows: list[dict[str, object]] = []
    exit_code = EXIT_OK
    for i, point in enumerate(grid):
        point_cfg = cfg.at_grid_point(point).with_out(out / f"point_{i:03d}")
        report = run_experiment(point_cfg, examples=examples)
        exit_code = max(exit_code, report.exit_code)
        for srow in report.summary:
            rows.append({"point": i, **{k: point.get(k) for k in keys}, **srow})
    candidates = [j for j, r in enumerate(rows) if r["method"] != "vanilla"] or list(range(len(rows)))
    best = max(candidates, key=lambda j: (rows[j]["wg"], -j))
    for j, r in enumerate(rows):
        r["best"] = j == best
    fields = ("point", *keys, *SUMMARY_FIELDS, "best")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", fields, rows)
    (out / "sweep.txt").write_text(render_table(rows, ("point", *keys, "method"), marker=best))
    return RunReport(out, rows, exit_code)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "evaluate the configured methods"),
                        ("sweep", "evaluate every point of the config's sweep grid"),
                        ("generate", "export the synthetic benchmark as an image directory")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="override dataset and adaptation seeds")
        s.add_argument("--out", type=Path, help="output directory")
        if name != "generate":
            s.add_argument("--method", choices=METHODS, help="evaluate only this method")
        if name == "run":
            s.add_argument("--dump-attention", type=Path, metavar="DIR",
                           help="write BiPrompt attention maps as grayscale PNGs")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = cfg.with_out(args.out)
        if getattr(args, "method", None):
            cfg = cfg.with_method(args.method)
        resolve_workers(cfg)
        if args.command == "sweep":
            cfg.grid()
    except (ConfigError, BiPromptError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "generate":
            export_dataset(load_examples(cfg), cfg.report.out)
            print(f"wrote {cfg.dataset.n} examples to {cfg.report.out}")
            return EXIT_OK
        report = sweep(cfg) if args.command == "sweep" else run_experiment(cfg, args.dump_attention)
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print((report.out / ("sweep.txt" if args.command == "sweep" else "summary.txt")).read_text(), end="")
    if report.exit_code:
        print("sample failures exceeded the configured tolerance", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
