"""Unioned label vocabulary and Head/Medium/Tail categorization."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from cxrlt.errors import ConfigError, LookupFailure

REGISTRY_FORMAT_VERSION = 1


class Category(str, enum.Enum):
    HEAD = "Head"
    MEDIUM = "Medium"
    TAIL = "Tail"


def canonical_key(name: str) -> str:
    return name.strip().casefold()


@dataclass(frozen=True)
class DatasetDescriptor:
    """One source dataset: its label names and positive counts per label."""

    name: str
    labels: Sequence[str]
    counts: Mapping[str, int] | Sequence[int] | None = None

    def count_map(self) -> dict[str, int]:
        if self.counts is None:
            return {label: 0 for label in self.labels}
        if isinstance(self.counts, Mapping):
            return {label: int(self.counts.get(label, 0)) for label in self.labels}
        if len(self.counts) != len(self.labels):
            raise ConfigError(
                f"dataset {self.name!r}: {len(self.counts)} counts for {len(self.labels)} labels"
            )
        return {label: int(c) for label, c in zip(self.labels, self.counts)}


@dataclass(frozen=True)
class CategoryThresholds:
    """``head_min`` is an exclusive bound, ``medium_min`` inclusive."""

    head_min: int
    medium_min: int

    def __post_init__(self):
        if not (self.head_min >= self.medium_min > 0):
            raise ConfigError(
                f"thresholds need head_min >= medium_min > 0, got {self.head_min}, {self.medium_min}"
            )

    def classify(self, count: int) -> Category:
        if count > self.head_min:
            return Category.HEAD
        if count >= self.medium_min:
            return Category.MEDIUM
        return Category.TAIL


# Defaults per source dataset, as used for the MIMIC / NIH / CheXpert / PadChest figures.
DEFAULT_THRESHOLDS = {
    "mimic": CategoryThresholds(30000, 10000),
    "nih": CategoryThresholds(10000, 5000),
    "chexpert": CategoryThresholds(25000, 10000),
    "padchest": CategoryThresholds(10000, 5000),
}


@dataclass(frozen=True)
class CategoryMap:
    assignment: Mapping[int, Category]
    tail_unique: frozenset[int] = frozenset()

    def indices(self, category: Category | str) -> list[int]:
        category = Category(category)
        return sorted(i for i, c in self.assignment.items() if c is category)

    def with_tail_unique(self, indices: Iterable[int]) -> "CategoryMap":
        indices = frozenset(indices)
        bad = [i for i in indices if self.assignment.get(i) is not Category.TAIL]
        if bad:
            raise ConfigError(f"tail_unique labels {bad} are not Tail")
        return CategoryMap(dict(self.assignment), indices)


@dataclass(frozen=True)
class LabelRegistry:
    """Ordered label vocabulary shared by every table, model and report.

    ``coverage`` maps a dataset name to the label indices it annotates and
    ``positive_counts`` maps ``(dataset, index)`` to a positive count.
    ``aliases`` maps a case-folded alternative spelling to a canonical label.
    """

    labels: tuple[str, ...]
    dataset_coverage: Mapping[str, frozenset[int]]
    positive_counts: Mapping[tuple[str, int], int] = field(default_factory=dict)
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        keys = [canonical_key(x) for x in self.labels]
        if len(set(keys)) != len(keys):
            raise ConfigError("registry label names must be unique")
        n = len(self.labels)
        for name, cover in self.dataset_coverage.items():
            if any(not 0 <= i < n for i in cover):
                raise ConfigError(f"coverage of {name!r} has out-of-range indices")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def datasets(self) -> list[str]:
        return list(self.dataset_coverage)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(list(self.labels), ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolve(self, name: str) -> str | None:
        """Canonical label for ``name`` (case-insensitive, aliases applied), else None."""
        key = canonical_key(name)
        key = canonical_key(self.aliases.get(key, key))
        for label in self.labels:
            if canonical_key(label) == key:
                return label
        return None

    def index(self, name: str) -> int:
        label = self.resolve(name)
        if label is None:
            raise LookupFailure(f"unknown label {name!r}")
        return self.labels.index(label)

    def coverage(self, dataset: str) -> frozenset[int]:
        try:
            return self.dataset_coverage[dataset]
        except KeyError:
            raise LookupFailure(f"unknown dataset {dataset!r}") from None

    def counts_for(self, dataset: str) -> dict[int, int]:
        cover = self.coverage(dataset)
        return {i: int(self.positive_counts.get((dataset, i), 0)) for i in sorted(cover)}

    def with_counts(self, counts: Mapping[str, Mapping[int, int]]) -> "LabelRegistry":
        """Copy with counts replaced for the given datasets."""
        merged = dict(self.positive_counts)
        for dataset, per_label in counts.items():
            cover = self.coverage(dataset)
            for i, c in per_label.items():
                if i not in cover:
                    raise ConfigError(f"count for label {i} outside coverage of {dataset!r}")
                if c < 0:
                    raise ConfigError("counts must be non-negative")
                merged[(dataset, int(i))] = int(c)
        return LabelRegistry(self.labels, dict(self.dataset_coverage), merged, dict(self.aliases))

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "aliases": dict(sorted(self.aliases.items())),
            "datasets": {
                name: {
                    "labels": [self.labels[i] for i in sorted(cover)],
                    "counts": {self.labels[i]: self.positive_counts.get((name, i), 0) for i in sorted(cover)},
                }
                for name, cover in self.dataset_coverage.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LabelRegistry":
        labels = tuple(data["labels"])
        index = {label: i for i, label in enumerate(labels)}
        coverage, counts = {}, {}
        for name, entry in data["datasets"].items():
            try:
                cover = frozenset(index[x] for x in entry["labels"])
            except KeyError as exc:
                raise ConfigError(f"dataset {name!r} names unregistered label {exc.args[0]!r}") from None
            coverage[name] = cover
            for label, c in entry.get("counts", {}).items():
                counts[(name, index[label])] = int(c)
        return cls(labels, coverage, counts, dict(data.get("aliases", {})))


def build_registry(
    descriptors: Sequence[DatasetDescriptor | tuple],
    aliases: Mapping[str, str] | None = None,
) -> LabelRegistry:
    """Union the label sets of several datasets.

    Labels keep first-seen order across descriptors in input order. Names are
    matched case-insensitively after trimming; ``aliases`` maps alternative
    spellings onto a canonical name and is never inferred.
    """
    if not descriptors:
        raise ConfigError("at least one dataset descriptor is required")
    alias_map = {canonical_key(k): v.strip() for k, v in (aliases or {}).items()}

    labels: list[str] = []
    keys: dict[str, int] = {}
    coverage: dict[str, frozenset[int]] = {}
    counts: dict[tuple[str, int], int] = {}
    for desc in descriptors:
        if not isinstance(desc, DatasetDescriptor):
            desc = DatasetDescriptor(*desc)
        if desc.name in coverage:
            raise ConfigError(f"duplicate dataset name {desc.name!r}")
        per_label = desc.count_map()
        cover: set[int] = set()
        for raw in desc.labels:
            key = canonical_key(raw)
            name = alias_map.get(key, raw.strip())
            key = canonical_key(name)
            if key not in keys:
                keys[key] = len(labels)
                labels.append(name)
            i = keys[key]
            if i in cover:
                raise ConfigError(f"dataset {desc.name!r} lists label {raw!r} twice")
            cover.add(i)
            c = per_label[raw]
            if c < 0:
                raise ConfigError(f"negative count for {raw!r} in {desc.name!r}")
            counts[(desc.name, i)] = c
        coverage[desc.name] = frozenset(cover)
    return LabelRegistry(tuple(labels), coverage, counts, alias_map)


def categorize(registry: LabelRegistry, dataset: str, thresholds: CategoryThresholds) -> CategoryMap:
    counts = registry.counts_for(dataset)
    return CategoryMap({i: thresholds.classify(c) for i, c in counts.items()})


def tail_unique(registry: LabelRegistry, category_map: CategoryMap, target: str) -> frozenset[int]:
    """Tail labels of ``target`` that no other dataset annotates."""
    cover = registry.coverage(target)
    others: set[int] = set()
    for name, other in registry.dataset_coverage.items():
        if name != target:
            others |= other
    return frozenset(
        i for i in cover if category_map.assignment.get(i) is Category.TAIL and i not in others
    )


@dataclass(frozen=True)
class RegistryDocument:
    """What gets written to ``registry.json``: registry plus categorization inputs."""

    registry: LabelRegistry
    target: str | None = None
    thresholds: CategoryThresholds | None = None
    # explicit categories override count-based categorization (label name -> category)
    categories: Mapping[str, str] | None = None

    def category_map(self) -> CategoryMap:
        if self.target is None:
            raise ConfigError("registry document has no target dataset")
        if self.categories:
            assignment = {self.registry.index(k): Category(v) for k, v in self.categories.items()}
            missing = set(self.registry.coverage(self.target)) - set(assignment)
            if missing:
                raise ConfigError(f"explicit categories miss labels {sorted(missing)}")
            cmap = CategoryMap(assignment)
        else:
            if self.thresholds is None:
                raise ConfigError("registry document has neither thresholds nor categories")
            cmap = categorize(self.registry, self.target, self.thresholds)
        return cmap.with_tail_unique(tail_unique(self.registry, cmap, self.target))

    def to_dict(self) -> dict:
        out = {"format_version": REGISTRY_FORMAT_VERSION, **self.registry.to_dict()}
        out["target"] = self.target
        out["thresholds"] = (
            None if self.thresholds is None
            else {"head_min": self.thresholds.head_min, "medium_min": self.thresholds.medium_min}
        )
        if self.categories:
            out["explicit_categories"] = dict(self.categories)
        if self.target is not None and (self.thresholds is not None or self.categories):
            cmap = self.category_map()
            out["categories"] = {self.registry.labels[i]: c.value for i, c in sorted(cmap.assignment.items())}
            out["tail_unique"] = [self.registry.labels[i] for i in sorted(cmap.tail_unique)]
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "RegistryDocument":
        thr = data.get("thresholds")
        return cls(
            LabelRegistry.from_dict(data),
            data.get("target"),
            None if thr is None else CategoryThresholds(int(thr["head_min"]), int(thr["medium_min"])),
            data.get("explicit_categories"),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RegistryDocument":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
