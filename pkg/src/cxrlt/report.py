"""Result tables and figures built from evaluation reports.

Nothing here recomputes an AP: tables and deltas read the per-label values and
means already stored in each :class:`~cxrlt.metrics.EvalReport`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from cxrlt.errors import IncompatibleError  # noqa: E402
from cxrlt.labels import CategoryThresholds, LabelRegistry, categorize  # noqa: E402
from cxrlt.metrics import CATEGORY_ORDER, EvalReport, category_deltas  # noqa: E402

GROUP_ORDER = ("Head", "Medium", "Tail", "Tail-U")
PNG_METADATA = {"Software": None}
CATEGORY_COLORS = {"Head": "#3b6ea8", "Medium": "#e0a030", "Tail": "#c0504d"}


@dataclass(frozen=True)
class TableRow:
    section: str  # "label" or "mean"
    group: str
    label: str
    prevalence: float | None
    values: Mapping[str, float | None]
    best: tuple[str, ...]


@dataclass(frozen=True)
class ResultTable:
    columns: tuple[str, ...]
    rows: tuple[TableRow, ...]

    def label_rows(self) -> list[TableRow]:
        return [r for r in self.rows if r.section == "label"]

    def mean_rows(self) -> list[TableRow]:
        return [r for r in self.rows if r.section == "mean"]


def _best(values: Mapping[str, float | None]) -> tuple[str, ...]:
    defined = {k: v for k, v in values.items() if v is not None}
    if not defined:
        return ()
    top = max(defined.values())
    return tuple(k for k, v in defined.items() if v == top)


def build_table(reports: Sequence[tuple[str, EvalReport]]) -> ResultTable:
    if not reports:
        raise IncompatibleError("no reports to tabulate")
    names = [n for n, _ in reports]
    if len(set(names)) != len(names):
        raise IncompatibleError("report names must be unique")
    first = reports[0][1]
    for name, rep in reports[1:]:
        if rep.label_names != first.label_names:
            raise IncompatibleError(f"report {name!r} covers a different label set")
        if [r.category for r in rep.labels] != [r.category for r in first.labels]:
            raise IncompatibleError(f"report {name!r} uses different categories")

    groups = [g for g in GROUP_ORDER if any(r.category == g for r in first.labels)]
    groups += sorted({r.category for r in first.labels} - set(groups))
    rows = []
    for g in groups:
        for k, res in enumerate(first.labels):
            if res.category != g:
                continue
            values = {n: rep.labels[k].ap for n, rep in reports}
            rows.append(TableRow("label", g, res.label, res.prevalence, values, _best(values)))
    for cat in [c for c in CATEGORY_ORDER if c in first.means] + [c for c in first.means if c not in CATEGORY_ORDER]:
        values = {n: rep.means.get(cat) for n, rep in reports}
        rows.append(TableRow("mean", cat, f"Mean ({cat})", first.prevalence_means.get(cat), values, _best(values)))
    return ResultTable(tuple(names), tuple(rows))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def table_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "group", "label", "prevalence", *table.columns, "best"])
    for r in table.rows:
        w.writerow([r.section, r.group, r.label, _fmt(r.prevalence), *(_fmt(r.values[c]) for c in table.columns), ";".join(r.best)])
    return buf.getvalue()


def table_text(table: ResultTable) -> str:
    """Fixed-width rendering; the best value in each row carries a ``*``."""
    label_w = max(len(r.label) for r in table.rows)
    col_w = max(8, *(len(c) for c in table.columns)) + 1
    lines = [f"{'':<7} {'Label':<{label_w}}  {'Prev.':>7}  " + "".join(f"{c:>{col_w}} " for c in table.columns)]
    lines.append("-" * len(lines[0]))
    prev_group = None
    for r in table.rows:
        if r.section == "mean" and prev_group != "mean":
            lines.append("-" * len(lines[0]))
        if r.section == "label" and prev_group not in (None, "mean") and r.group != prev_group:
            lines.append("")
        cells = []
        for c in table.columns:
            v = r.values[c]
            cell = "-" if v is None else f"{v:.4f}" + ("*" if c in r.best else " ")
            cells.append(f"{cell:>{col_w}} ")
        group = r.group if r.section == "label" else ""
        prev = "" if r.prevalence is None else f"{r.prevalence:.4f}"
        lines.append(f"{group:<7} {r.label:<{label_w}}  {prev:>7}  " + "".join(cells))
        prev_group = r.group if r.section == "label" else "mean"
    return "\n".join(line.rstrip() for line in lines) + "\n"


def render_table(reports: Sequence[tuple[str, EvalReport]], out_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.txt`` grouping labels Head/Medium/Tail/Tail-U."""
    table = build_table(reports)
    stem = Path(out_stem)
    csv_path, txt_path = stem.with_suffix(".csv"), stem.with_suffix(".txt")
    csv_path.write_text(table_csv(table), encoding="utf-8")
    txt_path.write_text(table_text(table), encoding="utf-8")
    return csv_path, txt_path


def read_table(path: str | Path) -> ResultTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    columns = tuple(header[4:-1])
    out = []
    for row in rows[1:]:
        if not row:
            continue
        values = {c: (float(x) if x else None) for c, x in zip(columns, row[4:-1])}
        best = tuple(row[-1].split(";")) if row[-1] else ()
        out.append(TableRow(row[0], row[1], row[2], float(row[3]) if row[3] else None, values, best))
    return ResultTable(columns, tuple(out))


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def distribution_figure(registry: LabelRegistry, dataset: str, thresholds: CategoryThresholds):
    """Descending bar chart of positive counts with the two category boundaries."""
    counts = registry.counts_for(dataset)
    cmap = categorize(registry, dataset, thresholds)
    order = sorted(counts, key=lambda i: (-counts[i], i))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(order) + 2), 4.0))
    ax.bar(
        range(len(order)),
        [counts[i] for i in order],
        color=[CATEGORY_COLORS[cmap.assignment[i].value] for i in order],
    )
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels([registry.labels[i] for i in order], rotation=90, fontsize=7)
    for y, style in ((thresholds.head_min, "--"), (thresholds.medium_min, ":")):
        ax.axhline(y, color="black", linestyle=style, linewidth=1)
    ax.set_ylabel("positive samples")
    ax.set_title(f"{dataset}: label distribution")
    fig.tight_layout()
    return fig


def plot_distribution(registry: LabelRegistry, dataset: str, thresholds: CategoryThresholds, path: str | Path) -> Path:
    return _save(distribution_figure(registry, dataset, thresholds), path)


def delta_figure(base: EvalReport, variant: EvalReport, categories: Sequence[str] | None = None):
    deltas = category_deltas(base, variant)
    names = [c for c in (categories or deltas) if c in deltas]
    if categories is not None and len(names) != len(categories):
        raise IncompatibleError(f"reports lack categories {sorted(set(categories) - set(deltas))}")
    values = [deltas[c] or 0.0 for c in names]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    ax.bar(range(len(names)), values, color=["#4a9a5b" if v >= 0 else "#c0504d" for v in values])
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylabel("mAP change")
    fig.tight_layout()
    return fig


def plot_delta(base: EvalReport, variant: EvalReport, categories: Sequence[str] | None, path: str | Path) -> Path:
    return _save(delta_figure(base, variant, categories), path)
