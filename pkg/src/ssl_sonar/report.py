"""Static figures and tables regenerated purely from result files."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .transfer import (BASELINE_LAYER, TransferResult, best_per_model, compare_to_baseline,  # noqa: E402
                       comparison_markdown, read_trials_csv)

SSL_COLOR = "tab:red"
SL_COLOR = "tab:green"
BASELINE_COLOR = "black"
LINESTYLES = ("-", "--", ":", "-.")
FIGURE_FORMATS = ("png", "svg")
TABLE_FORMATS = ("md", "csv")


class ReportError(ValueError):
    pass


def _is_baseline(r: TransferResult) -> bool:
    return r.layer_name == BASELINE_LAYER


def _color(pretraining: str) -> str:
    return SL_COLOR if pretraining == "sl" else SSL_COLOR


def collect_results(inputs: Iterable[str | Path]) -> tuple[list[TransferResult], list[dict]]:
    """All trial CSVs and run metrics below the given files or directories."""
    results, metrics = [], []
    for src in inputs:
        src = Path(src)
        if src.is_file():
            files = [src]
        elif src.is_dir():
            files = sorted(src.rglob("trials.csv")) + sorted(src.rglob("metrics.json"))
        else:
            raise ReportError(f"{src} does not exist")
        for f in files:
            if f.name.endswith(".csv"):
                results.extend(read_trials_csv(f))
            else:
                metrics.append(json.loads(f.read_text()))
    return results, metrics


def _save(fig, base: Path, formats: Sequence[str]) -> list[Path]:
    out = []
    for fmt in formats:
        p = base.with_suffix(f".{fmt}")
        meta = {"Date": None} if fmt == "svg" else {"Software": None} if fmt == "png" else None
        fig.savefig(p, format=fmt, metadata=meta, dpi=100)
        out.append(p)
    plt.close(fig)
    return out


def curve_figures(results: Sequence[TransferResult], out: Path, formats=FIGURE_FORMATS) -> list[Path]:
    """One accuracy-vs-spc figure per model group, SSL red and SL green with
    +-std bands; the raw-pixel baseline, if present, is drawn in black."""
    baseline = sorted((r for r in results if _is_baseline(r)), key=lambda r: r.spc)
    groups: dict[str, dict[tuple[str, str, str], list[TransferResult]]] = defaultdict(lambda: defaultdict(list))
    for r in results:
        if not _is_baseline(r):
            groups[r.model_ref.split(":")[0]][(r.model_ref, r.pretraining, r.layer_name)].append(r)
    written = []
    for group in sorted(groups):
        fig, ax = plt.subplots(figsize=(6, 4))
        style_idx: dict[str, int] = {}
        for (ref, pre, layer), rs in sorted(groups[group].items()):
            rs = sorted(rs, key=lambda r: r.spc)
            x = [r.spc for r in rs]
            m = [r.mean_accuracy for r in rs]
            s = [r.std_accuracy for r in rs]
            ls = LINESTYLES[style_idx.setdefault(layer, len(style_idx)) % len(LINESTYLES)]
            ax.plot(x, m, color=_color(pre), linestyle=ls, marker="o", ms=3, label=f"{ref} {layer}")
            ax.fill_between(x, [a - b for a, b in zip(m, s)], [a + b for a, b in zip(m, s)],
                            color=_color(pre), alpha=0.15, linewidth=0)
        if baseline:
            ax.plot([r.spc for r in baseline], [r.mean_accuracy for r in baseline], color=BASELINE_COLOR,
                    linestyle="--", label="raw-pixel SVM")
        ax.set_xlabel("samples per class")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(group)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=6, loc="lower right")
        fig.tight_layout()
        written += _save(fig, out / f"curves_{group}", formats)
    return written


def bar_figure(results: Sequence[TransferResult], spc: int, out: Path, formats=FIGURE_FORMATS) -> list[Path]:
    """Best layer per model at one spc: absolute accuracy and, when the
    baseline is available, the difference to it."""
    best = sorted(best_per_model([r for r in results if not _is_baseline(r)], spc), key=lambda r: r.model_ref)
    base = [r for r in results if _is_baseline(r) and r.spc == spc]
    if not best:
        raise ReportError(f"no results at spc={spc}")
    ncols = 2 if base else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5 * ncols + 1, 4), squeeze=False)
    labels = [r.model_ref for r in best]
    colors = [_color(r.pretraining) for r in best]
    ax = axes[0, 0]
    ax.bar(labels, [r.mean_accuracy for r in best], yerr=[r.std_accuracy for r in best], color=colors)
    if base:
        ax.axhline(base[0].mean_accuracy, color=BASELINE_COLOR, linestyle="--", linewidth=1)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"{spc} spc")
    ax.tick_params(axis="x", labelrotation=60, labelsize=7)
    if base:
        ax2 = axes[0, 1]
        ax2.bar(labels, [r.mean_accuracy - base[0].mean_accuracy for r in best], color=colors)
        ax2.axhline(0, color=BASELINE_COLOR, linewidth=1)
        ax2.set_ylabel("difference to baseline (pts)")
        ax2.tick_params(axis="x", labelrotation=60, labelsize=7)
    fig.tight_layout()
    return _save(fig, out / f"bars_spc{spc}", formats)


# ---------------------------------------------------------------------------
# tables

def _md(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_table(base: Path, header, rows, formats) -> list[Path]:
    out = []
    for fmt in formats:
        p = base.with_suffix(f".{fmt}")
        p.write_text(_md(header, rows) if fmt == "md" else _csv(header, rows))
        out.append(p)
    return out


def transfer_table(results: Sequence[TransferResult]):
    spcs = sorted({r.spc for r in results})
    cells: dict[tuple, dict[int, TransferResult]] = defaultdict(dict)
    for r in results:
        cells[(r.model_ref, r.pretraining, r.layer_name)][r.spc] = r
    header = ["Model", "Pretraining", "Layer"] + [f"{s} spc" for s in spcs]
    rows = []
    for key in sorted(cells, key=lambda k: (k[1] == "none", k)):
        rows.append(list(key) + [f"{cells[key][s].mean_accuracy:.2f} ± {cells[key][s].std_accuracy:.2f}"
                                 if s in cells[key] else "" for s in spcs])
    return header, rows


def pretext_table(metrics: Sequence[dict]):
    header = ["Run", "Task", "Model", "Parameters", "Accuracy (%)", "MSE", "MAE"]
    rows = []
    for m in sorted(metrics, key=lambda m: m.get("run_id", "")):
        t = m.get("test", {})
        rows.append([m.get("run_id", ""), m.get("task", ""), m.get("model_ref", ""), m.get("param_count", ""),
                     f"{100 * t['accuracy']:.2f}" if "accuracy" in t else "",
                     f"{t['mse']:.4f}" if "mse" in t else "", f"{t['mae']:.4f}" if "mae" in t else ""])
    return header, rows


def render_report(inputs: Iterable[str | Path], out: str | Path, spcs: Sequence[int] = (200,),
                  figure_formats: Sequence[str] = FIGURE_FORMATS,
                  table_formats: Sequence[str] = TABLE_FORMATS) -> list[Path]:
    plt.rcParams["svg.hashsalt"] = "ssl-sonar"
    results, metrics = collect_results(inputs)
    if not results and not metrics:
        raise ReportError("no results found (expected trials.csv or metrics.json files)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if results:
        written += curve_figures(results, out, figure_formats)
        have = {r.spc for r in results}
        for spc in spcs:
            if spc in have:
                written += bar_figure(results, spc, out, figure_formats)
        written += _write_table(out / "transfer_table", *transfer_table(results), table_formats)
        base = [r for r in results if _is_baseline(r)]
        models = [r for r in results if not _is_baseline(r)]
        base_spcs = {b.spc for b in base}
        for spc in spcs:
            if spc in base_spcs and models:
                diffs = compare_to_baseline(best_per_model(models, spc), [b for b in base if b.spc == spc])
                rows = [[d.model_ref, d.layer_name, d.spc, f"{d.accuracy:.2f}", f"{d.baseline:.2f}",
                         f"{d.difference:+.2f}"] for d in diffs]
                header = ["Model", "Layer", "spc", "Accuracy (%)", "Baseline (%)", "Difference to Baseline"]
                for fmt in table_formats:
                    p = out / f"comparison_spc{spc}.{fmt}"
                    p.write_text(comparison_markdown(diffs) if fmt == "md" else _csv(header, rows))
                    written.append(p)
    if metrics:
        written += _write_table(out / "pretext_table", *pretext_table(metrics), table_formats)
    return written
