"""Average precision, category macro-means and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from cxrlt.errors import ContractError, IncompatibleError
from cxrlt.labels import Category, CategoryMap, LabelRegistry

CATEGORY_ORDER = ("All", "Head", "Medium", "Tail", "Tail-U")
REPORT_COLUMNS = ("label", "category", "prevalence", "n_pos", "n_known", "ap")
MEANS_MARKER = "# means"
MEANS_COLUMNS = ("category", "ap", "prevalence")
EXCLUDED_MARKER = "# excluded"
EXCLUDED_COLUMNS = ("label", "reason")
CATEGORIES_MARKER = "# categories"
CATEGORIES_COLUMNS = ("category", "labels")


def _check_inputs(scores, truths) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truths = np.asarray(truths).ravel()
    if scores.shape != truths.shape:
        raise ContractError(f"length mismatch: {scores.size} scores vs {truths.size} truths")
    if not np.all(np.isin(truths, (0, 1))):
        raise ContractError("truths must be binary")
    if np.isnan(scores).any():
        raise ContractError("scores contain NaN")
    return scores, truths.astype(np.int64)


def average_precision(scores, truths) -> float | None:
    """Non-interpolated AP: mean of precision@k over the ranks k of the positives.

    Ranking is by descending score; ties go to the lower original index.
    Returns None when there are no positives.
    """
    scores, truths = _check_inputs(scores, truths)
    n_pos = int(truths.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = truths[order]
    precision_at_k = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision_at_k[hits == 1].sum() / n_pos)


def ap_bruteforce_oracle(scores, truths) -> float | None:
    """Reference AP built from an explicit precision-recall step function.

    Every item's (score, -index) key is used as a threshold; for each one the
    predicted-positive set is recomputed from scratch by comparison, and AP is
    the sum of precision times the recall increment. Quadratic on purpose.
    """
    scores, truths = _check_inputs(scores, truths)
    n_pos = int(truths.sum())
    if n_pos == 0:
        return None
    idx = np.arange(scores.size)
    # selected[t, i]: item i ranks at or above threshold item t
    selected = (scores[None, :] > scores[:, None]) | (
        (scores[None, :] == scores[:, None]) & (idx[None, :] <= idx[:, None])
    )
    predicted = selected.sum(axis=1)
    true_pos = (selected & (truths[None, :] == 1)).sum(axis=1)
    curve = sorted(zip(predicted.tolist(), true_pos.tolist()))
    total, prev_recall = 0.0, 0.0
    for pp, tp in curve:
        recall = tp / n_pos
        total += (tp / pp) * (recall - prev_recall)
        prev_recall = recall
    return total


@dataclass(frozen=True)
class CategorySpec:
    groups: Mapping[str, frozenset[int]]

    def __post_init__(self):
        g = self.groups
        if "All" in g:
            parts = [g[k] for k in ("Head", "Medium", "Tail") if k in g]
            if parts and frozenset().union(*parts) != g["All"]:
                raise ContractError("Head/Medium/Tail must cover All")
            if parts and sum(len(p) for p in parts) != len(g["All"]):
                raise ContractError("Head/Medium/Tail must be disjoint")
        if "Tail-U" in g and "Tail" in g and not g["Tail-U"] <= g["Tail"]:
            raise ContractError("Tail-U must be a subset of Tail")

    @classmethod
    def from_category_map(cls, cmap: CategoryMap) -> "CategorySpec":
        groups = {"All": frozenset(cmap.assignment)}
        for cat in Category:
            groups[cat.value] = frozenset(cmap.indices(cat))
        groups["Tail-U"] = frozenset(cmap.tail_unique)
        return cls(groups)

    def names(self) -> list[str]:
        known = [k for k in CATEGORY_ORDER if k in self.groups]
        return known + [k for k in self.groups if k not in CATEGORY_ORDER]

    def display_category(self, index: int) -> str:
        """Most specific non-All group containing ``index`` (smallest set)."""
        best = None
        for name in self.names():
            if name == "All" or index not in self.groups[name]:
                continue
            if best is None or len(self.groups[name]) < len(self.groups[best]):
                best = name
        return best or ""

    def to_dict(self, labels: Sequence[str]) -> dict:
        return {k: [labels[i] for i in sorted(v)] for k, v in self.groups.items()}


def category_means(values: Mapping[int, float | None], categories: CategorySpec) -> dict[str, float | None]:
    """Arithmetic mean of the defined values in each category; None if none defined."""
    out = {}
    for name in categories.names():
        vals = [values[i] for i in sorted(categories.groups[name]) if values.get(i) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return out


@dataclass(frozen=True)
class LabelResult:
    label: str
    category: str
    prevalence: float | None
    n_pos: int | None
    n_known: int | None
    ap: float | None


@dataclass(frozen=True)
class EvalReport:
    labels: tuple[LabelResult, ...]
    means: Mapping[str, float | None]
    prevalence_means: Mapping[str, float | None]
    excluded: tuple[tuple[str, str], ...] = ()
    categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(r.label for r in self.labels)

    def ap(self, label: str) -> float | None:
        return next(r.ap for r in self.labels if r.label == label)

    def to_dict(self) -> dict:
        return {
            "labels": [
                {k: getattr(r, k) for k in REPORT_COLUMNS} for r in self.labels
            ],
            "means": dict(self.means),
            "prevalence_means": dict(self.prevalence_means),
            "excluded": [list(e) for e in self.excluded],
            "categories": {k: list(v) for k, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        return cls(
            tuple(LabelResult(**d) for d in data["labels"]),
            dict(data["means"]),
            dict(data["prevalence_means"]),
            tuple(tuple(e) for e in data.get("excluded", ())),
            {k: tuple(v) for k, v in data.get("categories", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.labels:
            w.writerow([r.label, r.category, _fmt(r.prevalence), _fmt(r.n_pos), _fmt(r.n_known), _fmt(r.ap)])
        w.writerow([])
        w.writerow([MEANS_MARKER])
        w.writerow(MEANS_COLUMNS)
        for name, value in self.means.items():
            w.writerow([name, _fmt(value), _fmt(self.prevalence_means.get(name))])
        w.writerow([])
        w.writerow([EXCLUDED_MARKER])
        w.writerow(EXCLUDED_COLUMNS)
        w.writerows(self.excluded)
        w.writerow([])
        w.writerow([CATEGORIES_MARKER])
        w.writerow(CATEGORIES_COLUMNS)
        for name, members in self.categories.items():
            w.writerow([name, ";".join(members)])
        return buf.getvalue()

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        path = Path(path)
        if path.suffix == ".csv":
            return cls.from_csv(path.read_text(encoding="utf-8"))
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        """Inverse of :meth:`to_csv`."""
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != REPORT_COLUMNS:
            raise ContractError("not an evaluation report CSV")
        labels, means, prev_means, excluded, categories = [], {}, {}, [], {}
        block = "labels"
        headers = {MEANS_MARKER: MEANS_COLUMNS, EXCLUDED_MARKER: EXCLUDED_COLUMNS, CATEGORIES_MARKER: CATEGORIES_COLUMNS}
        for row in rows[1:]:
            if not row:
                continue
            if row[0] in headers:
                block = row[0]
                continue
            if tuple(row) == headers.get(block):
                continue
            if block == MEANS_MARKER:
                means[row[0]] = _parse_float(row[1])
                prev_means[row[0]] = _parse_float(row[2])
            elif block == EXCLUDED_MARKER:
                excluded.append((row[0], row[1]))
            elif block == CATEGORIES_MARKER:
                categories[row[0]] = tuple(row[1].split(";")) if row[1] else ()
            else:
                labels.append(LabelResult(
                    row[0], row[1], _parse_float(row[2]), _parse_int(row[3]), _parse_int(row[4]), _parse_float(row[5])
                ))
        return cls(tuple(labels), means, prev_means, tuple(excluded), categories)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_float(cell: str) -> float | None:
    return float(cell) if cell != "" else None


def _parse_int(cell: str) -> int | None:
    return int(cell) if cell != "" else None


def prevalence_baseline(annotations, registry: LabelRegistry | None = None) -> tuple[list[float | None], list[tuple[int, str]]]:
    """Per-label n_pos / n_known over non-Unknown rows; all-Unknown labels are excluded."""
    ann = np.asarray(annotations)
    if ann.ndim != 2:
        raise ContractError("annotations must be a 2-D matrix")
    if registry is not None and ann.shape[1] != len(registry):
        raise ContractError("annotation width does not match registry")
    known = ann >= 0
    n_known = known.sum(axis=0)
    n_pos = (ann == 1).sum(axis=0)
    out, excluded = [], []
    for j in range(ann.shape[1]):
        if n_known[j] == 0:
            out.append(None)
            excluded.append((j, "no known annotations"))
        else:
            out.append(float(n_pos[j] / n_known[j]))
    return out, excluded


def evaluate(scores, annotations, registry: LabelRegistry, categories: CategorySpec) -> EvalReport:
    """Per-label AP over rows whose annotation is known, plus category macro-means."""
    values = getattr(scores, "values", scores)
    values = np.asarray(values, dtype=np.float64)
    ann = np.asarray(annotations)
    if values.shape[0] == 0:
        raise ContractError("cannot evaluate an empty table")
    if values.shape != ann.shape or values.shape[1] != len(registry):
        raise ContractError(f"scores {values.shape} / annotations {ann.shape} / registry {len(registry)} mismatch")

    evaluated = sorted(categories.groups.get("All", range(len(registry))))
    results, excluded = [], []
    ap_values, prev_values = {}, {}
    for j in evaluated:
        name = registry.labels[j]
        known = ann[:, j] >= 0
        n_known = int(known.sum())
        truth = (ann[known, j] == 1).astype(np.int64)
        n_pos = int(truth.sum())
        prevalence = n_pos / n_known if n_known else None
        ap = average_precision(values[known, j], truth) if n_known else None
        if n_known == 0:
            excluded.append((name, "no known annotations"))
        elif n_pos == 0:
            excluded.append((name, "no positives"))
        ap_values[j], prev_values[j] = ap, prevalence
        results.append(LabelResult(name, categories.display_category(j), prevalence, n_pos, n_known, ap))
    return EvalReport(
        tuple(results),
        category_means(ap_values, categories),
        category_means(prev_values, categories),
        tuple(excluded),
        {k: tuple(v) for k, v in categories.to_dict(registry.labels).items()},
    )


def report_from_values(
    registry: LabelRegistry,
    categories: CategorySpec,
    ap: Sequence[float | None],
    prevalence: Sequence[float | None] | None = None,
) -> EvalReport:
    """Report from already-computed per-label APs (e.g. published numbers)."""
    if len(ap) != len(registry):
        raise ContractError("one AP per registry label is required")
    prevalence = prevalence if prevalence is not None else [None] * len(registry)
    ap_values = {j: ap[j] for j in range(len(registry))}
    prev_values = {j: prevalence[j] for j in range(len(registry))}
    results = tuple(
        LabelResult(registry.labels[j], categories.display_category(j), prevalence[j], None, None, ap[j])
        for j in sorted(categories.groups.get("All", range(len(registry))))
    )
    excluded = tuple((r.label, "no positives") for r in results if r.ap is None)
    return EvalReport(
        results,
        category_means(ap_values, categories),
        category_means(prev_values, categories),
        excluded,
        {k: tuple(v) for k, v in categories.to_dict(registry.labels).items()},
    )


def macro_map(scores, annotations) -> float:
    """Mean AP over labels with at least one known positive; NaN if none."""
    values = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    ann = np.asarray(annotations)
    aps = []
    for j in range(ann.shape[1]):
        known = ann[:, j] >= 0
        if known.any():
            ap = average_precision(values[known, j], (ann[known, j] == 1).astype(np.int64))
            if ap is not None:
                aps.append(ap)
    return float(np.mean(aps)) if aps else math.nan


def category_deltas(base: EvalReport, variant: EvalReport) -> dict[str, float | None]:
    if base.label_names != variant.label_names:
        raise IncompatibleError("reports cover different labels")
    if base.categories and variant.categories and base.categories != variant.categories:
        raise IncompatibleError("reports use different category specs")
    if list(base.means) != list(variant.means):
        raise IncompatibleError("reports have different category sets")
    out = {}
    for name in base.means:
        a, b = base.means[name], variant.means[name]
        out[name] = None if a is None or b is None else b - a
    return out
