"""Score matrices and their CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cxrlt.errors import ContractError

KEY_COLUMN = "image_ref"


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """N x L probabilities; rows follow ``image_refs``, columns follow ``labels``."""

    image_refs: tuple[str, ...]
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.image_refs), len(self.labels)):
            raise ContractError(
                f"score values {values.shape} vs {len(self.image_refs)} rows x {len(self.labels)} labels"
            )
        if values.size and (np.isnan(values).any() or values.min() < 0.0 or values.max() > 1.0):
            raise ContractError("scores must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([KEY_COLUMN, *self.labels])
        for ref, row in zip(self.image_refs, self.values):
            w.writerow([ref, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ScoreMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != KEY_COLUMN:
            raise ContractError(f"{path}: first column must be {KEY_COLUMN}")
        labels = tuple(rows[0][1:])
        refs, values = [], []
        for row in rows[1:]:
            if row:
                refs.append(row[0])
                values.append([float(x) for x in row[1:]])
        return cls(tuple(refs), labels, np.array(values, dtype=np.float64).reshape(len(refs), len(labels)))


def sample_keys(records: Sequence) -> tuple[str, ...]:
    """Row keys for score files: ``dataset/image_ref`` keeps refs unique across datasets."""
    return tuple(f"{r.dataset}/{r.image_ref}" for r in records)


def study_key(ref: str) -> str:
    """Study of an image: its parent directory (``.../p10/p10000032/s50414267/x.jpg``)."""
    head, sep, _ = ref.rpartition("/")
    return head if sep else ref


def aggregate_by_study(scores: ScoreMatrix, annotations: np.ndarray) -> tuple[ScoreMatrix, np.ndarray]:
    """Mean score per study; a study label is Positive if any view is, else Negative if any is known."""
    annotations = np.asarray(annotations)
    if annotations.shape != scores.shape:
        raise ContractError(f"annotations {annotations.shape} vs scores {scores.shape}")
    keys = [study_key(r) for r in scores.image_refs]
    studies = tuple(dict.fromkeys(keys))
    index = {k: i for i, k in enumerate(studies)}
    rows = np.array([index[k] for k in keys], dtype=np.int64)
    sums = np.zeros((len(studies), scores.shape[1]))
    np.add.at(sums, rows, scores.values)
    counts = np.bincount(rows, minlength=len(studies))[:, None]
    merged = np.full((len(studies), scores.shape[1]), -1, dtype=annotations.dtype)
    np.maximum.at(merged, rows, annotations)
    values = np.clip(sums / counts, 0.0, 1.0)
    return ScoreMatrix(studies, scores.labels, values), merged
