"""Manifest ingestion, tri-state annotation tables, patient-level splits and image loading."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from cxrlt.errors import (
    ConfigError,
    ImageLoadError,
    IncompatibleError,
    ManifestRowError,
    SchemaError,
    SplitError,
    ValidationError,
)
from cxrlt.labels import LabelRegistry

FIXED_COLUMNS = ("image_path", "patient_id", "view")
SYNTHETIC_PREFIX = "synthetic:"

DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.25


class AnnotationState(enum.IntEnum):
    UNKNOWN = -1
    NEGATIVE = 0
    POSITIVE = 1


_CELL_STATES = {
    "": AnnotationState.UNKNOWN,
    "-1": AnnotationState.UNKNOWN,
    "-1.0": AnnotationState.UNKNOWN,
    "0": AnnotationState.NEGATIVE,
    "0.0": AnnotationState.NEGATIVE,
    "1": AnnotationState.POSITIVE,
    "1.0": AnnotationState.POSITIVE,
}
_STATE_CELLS = {
    AnnotationState.UNKNOWN: "",
    AnnotationState.NEGATIVE: "0",
    AnnotationState.POSITIVE: "1",
}


@dataclass(frozen=True, eq=False)
class SampleRecord:
    image_ref: str
    patient_id: str
    dataset: str
    annotations: np.ndarray  # int8, values from AnnotationState
    view: str = ""
    synthetic: bool = False
    root: str = ""

    @property
    def image_path(self) -> Path:
        return Path(self.root) / self.image_ref

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            (self.image_ref, self.patient_id, self.dataset, self.view, self.synthetic, self.root)
            == (other.image_ref, other.patient_id, other.dataset, other.view, other.synthetic, other.root)
            and np.array_equal(self.annotations, other.annotations)
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetTable:
    records: tuple[SampleRecord, ...]
    registry_ref: str
    labels: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def annotation_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(self.labels)), dtype=np.int8)
        return np.stack([r.annotations for r in self.records]).astype(np.int8)

    def subset(self, indices: Iterable[int]) -> "DatasetTable":
        return DatasetTable(tuple(self.records[i] for i in sorted(indices)), self.registry_ref, self.labels)

    def positive_counts(self) -> np.ndarray:
        return (self.annotation_matrix() == AnnotationState.POSITIVE).sum(axis=0)


@dataclass(frozen=True)
class SplitAssignment:
    splits: Mapping[str, frozenset[int]]
    seed: int

    def table(self, table: DatasetTable, name: str) -> DatasetTable:
        return table.subset(self.splits[name])

    def to_dict(self, table: DatasetTable | None = None) -> dict:
        out = {"seed": self.seed, "splits": {k: sorted(v) for k, v in self.splits.items()}}
        if table is not None:
            out["patients"] = {
                k: sorted({table.records[i].patient_id for i in v}) for k, v in self.splits.items()
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "SplitAssignment":
        return cls({k: frozenset(v) for k, v in data["splits"].items()}, int(data["seed"]))


def read_manifest_header(path: str | Path) -> list[str]:
    """Label column names of a manifest, in file order."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise SchemaError(f"{path}: empty manifest")
    _check_fixed_columns(header, path)
    return [h.strip() for h in header[len(FIXED_COLUMNS):]]


def _check_fixed_columns(header: Sequence[str], path) -> None:
    if tuple(h.strip() for h in header[: len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
        raise SchemaError(f"{path}: header must start with {','.join(FIXED_COLUMNS)}")


def parse_manifest(
    path: str | Path,
    registry: LabelRegistry,
    dataset: str,
    synthetic: bool = False,
) -> DatasetTable:
    """Read a manifest CSV into a table bound to ``registry``.

    Cells ``1``/``0`` become Positive/Negative; empty cells and ``-1`` (uncertain)
    become Unknown, as does every label outside the dataset's coverage.
    Synthetic tables may leave ``patient_id`` empty; ids are then assigned as
    ``synthetic:<n>``.
    """
    path = Path(path)
    cover = registry.coverage(dataset)
    root = str(path.parent)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty manifest")
        _check_fixed_columns(header, path)
        columns = []
        for name in header[len(FIXED_COLUMNS):]:
            label = registry.resolve(name)
            if label is None:
                raise SchemaError(f"{path}: unknown label column {name!r}")
            i = registry.labels.index(label)
            if i not in cover:
                raise SchemaError(f"{path}: label {name!r} is not annotated by dataset {dataset!r}")
            if i in columns:
                raise SchemaError(f"{path}: duplicate label column {name!r}")
            columns.append(i)

        records = []
        width = len(header)
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ManifestRowError(rownum, f"expected {width} cells, got {len(row)}")
            image_ref, patient_id, view = (c.strip() for c in row[:3])
            if not image_ref:
                raise ManifestRowError(rownum, "missing image_path")
            if not patient_id:
                if not synthetic:
                    raise SchemaError(f"{path}: row {rownum}: missing patient_id")
                patient_id = f"{SYNTHETIC_PREFIX}{len(records)}"
            ann = np.full(len(registry), AnnotationState.UNKNOWN, dtype=np.int8)
            for i, cell in zip(columns, row[3:]):
                try:
                    ann[i] = _CELL_STATES[cell.strip()]
                except KeyError:
                    raise ManifestRowError(rownum, f"bad label cell {cell!r}") from None
            records.append(SampleRecord(image_ref, patient_id, dataset, ann, view, synthetic, root))
    return DatasetTable(tuple(records), registry.fingerprint, registry.labels)


def format_manifest(table: DatasetTable, registry: LabelRegistry, dataset: str | None = None) -> str:
    """Canonical manifest text: covered labels in registry order, cells 1/0/empty, LF endings."""
    if table.registry_ref != registry.fingerprint:
        raise IncompatibleError("table is bound to a different registry")
    datasets = {r.dataset for r in table.records}
    if dataset is None:
        if len(datasets) > 1:
            raise IncompatibleError("table mixes datasets; pass dataset= explicitly")
        dataset = datasets.pop() if datasets else None
    if dataset is None:
        raise ConfigError("cannot infer dataset of an empty table")
    cover = sorted(registry.coverage(dataset))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*FIXED_COLUMNS, *(registry.labels[i] for i in cover)])
    for r in table.records:
        pid = "" if r.synthetic and r.patient_id.startswith(SYNTHETIC_PREFIX) else r.patient_id
        writer.writerow([r.image_ref, pid, r.view, *(_STATE_CELLS[AnnotationState(int(r.annotations[i]))] for i in cover)])
    return buf.getvalue()


def write_manifest(table: DatasetTable, registry: LabelRegistry, path: str | Path, dataset: str | None = None) -> Path:
    path = Path(path)
    path.write_text(format_manifest(table, registry, dataset), encoding="utf-8")
    return path


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    # Integer counts summing to n, each >= 1, closest to n*f in max relative error.
    ideal = [n * f for f in fractions]
    floors = [math.floor(x) for x in ideal]
    k = len(fractions)
    if k <= 12:
        best, best_err = None, math.inf
        for ups in itertools.product((0, 1), repeat=k):
            counts = [f + u for f, u in zip(floors, ups)]
            if sum(counts) != n or min(counts) < 1:
                continue
            err = max(abs(c - x) for c, x in zip(counts, ideal))
            if err < best_err - 1e-12:
                best, best_err = counts, err
        if best is not None:
            return best
    # largest remainder, then make sure no split is empty
    counts = list(floors)
    order = sorted(range(k), key=lambda i: (-(ideal[i] - floors[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(k):
        while counts[i] < 1:
            j = max(range(k), key=lambda j: (counts[j], -j))
            counts[j] -= 1
            counts[i] += 1
    return counts


def patient_split(
    table: DatasetTable,
    ratios: Sequence[tuple[str, float]] | Mapping[str, float],
    seed: int,
) -> SplitAssignment:
    """Partition records by patient so no patient spans two splits.

    Patients (in first-appearance order) are permuted with a seeded PRNG and cut
    into contiguous blocks sized as close to the ratios as integers allow.
    Synthetic records never take part; they all go to ``train`` (or the first
    split when there is none).
    """
    ratios = list(ratios.items()) if isinstance(ratios, Mapping) else [tuple(r) for r in ratios]
    if not ratios:
        raise SplitError("no splits requested")
    names = [name for name, _ in ratios]
    if len(set(names)) != len(names):
        raise SplitError("split names must be unique")
    fractions = [float(f) for _, f in ratios]
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"split fractions must be positive and sum to 1, got {fractions}")

    patients: dict[str, list[int]] = {}
    synthetic: list[int] = []
    for i, r in enumerate(table.records):
        if r.synthetic:
            synthetic.append(i)
        else:
            patients.setdefault(r.patient_id, []).append(i)
    ids = list(patients)
    if len(ids) < len(ratios):
        raise SplitError(f"{len(ids)} patients cannot fill {len(ratios)} splits")

    order = np.random.default_rng(seed).permutation(len(ids))
    counts = _allocate(len(ids), fractions)
    out: dict[str, frozenset[int]] = {}
    start = 0
    for name, c in zip(names, counts):
        chosen = order[start:start + c]
        start += c
        out[name] = frozenset(i for p in chosen for i in patients[ids[p]])
    if synthetic:
        dest = "train" if "train" in out else names[0]
        out[dest] = out[dest] | frozenset(synthetic)
    return SplitAssignment(out, seed)


def merge_datasets(tables: Sequence[DatasetTable]) -> DatasetTable:
    if not tables:
        raise ConfigError("nothing to merge")
    ref = tables[0].registry_ref
    if any(t.registry_ref != ref for t in tables):
        raise IncompatibleError("tables are bound to different registries")
    return DatasetTable(tuple(r for t in tables for r in t.records), ref, tables[0].labels)


def mix_synthetic(real: DatasetTable, synthetic: DatasetTable, tail_labels: Iterable[int]) -> DatasetTable:
    """Append synthetic records after validating each carries a Positive tail label.

    Synthetic records are weighted exactly like real ones.
    """
    tail = sorted(set(tail_labels))
    if not tail:
        raise ConfigError("no tail labels given")
    bad = []
    for n, r in enumerate(synthetic.records):
        if not r.synthetic or not np.any(r.annotations[tail] == AnnotationState.POSITIVE):
            bad.append(n)
    if bad:
        raise ValidationError(
            f"{len(bad)} synthetic records lack the synthetic flag or a Positive tail label: rows {bad[:20]}",
            bad,
        )
    return merge_datasets([real, synthetic])


def load_image(
    record: SampleRecord | str | Path,
    side: int,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
) -> np.ndarray:
    """Decode, convert to grayscale, bilinearly resize and standardize one image.

    Returns a float32 array of shape (3, side, side) with the gray channel
    replicated, intensities scaled to [0, 1] before ``(x - mean) / std``.
    """
    if side <= 0:
        raise ConfigError("side must be positive")
    if isinstance(record, SampleRecord):
        path, ref = record.image_path, record.image_ref
    else:
        path = ref = record
    try:
        with Image.open(path) as img:
            img.load()
            arr = _to_unit_gray(img)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageLoadError(str(ref), str(exc)) from exc
    if arr.shape != (side, side):
        arr = np.asarray(
            Image.fromarray(arr, mode="F").resize((side, side), Image.BILINEAR), dtype=np.float32
        )
    arr = (arr - np.float32(mean)) / np.float32(std)
    return np.repeat(arr[None], 3, axis=0)


def _to_unit_gray(img: Image.Image) -> np.ndarray:
    if img.mode in ("I;16", "I;16B", "I;16L"):
        return np.asarray(img, dtype=np.float32) / 65535.0
    if img.mode == "I":
        arr = np.asarray(img, dtype=np.float32)
        return arr / 65535.0 if arr.max(initial=0) > 255 else arr / 255.0
    if img.mode == "F":
        return np.asarray(img, dtype=np.float32)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.float32) / 255.0
