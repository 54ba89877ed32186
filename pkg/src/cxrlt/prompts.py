"""Report-style prompt manifests for external synthetic image generation.

Templates carry ``«SLOT»`` placeholders. Each slot lists the labels it may
express; the filled phrase is recorded as a byte span so downstream tools
know which words name which finding.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from cxrlt.errors import ConfigError, CoverageError
from cxrlt.labels import Category, CategoryMap, LabelRegistry

SLOT_RE = re.compile(r"«([A-Za-z0-9_]+)»")

# label -> phrases a radiologist might write for it
DEFAULT_PHRASES: dict[str, tuple[str, ...]] = {
    "Pleural Thickening": ("pleural thickening", "thickened pleura"),
    "Calcification of the Aorta": ("aortic calcification", "calcification of the aorta"),
    "Tortuous Aorta": ("tortuous aorta", "tortuosity of the thoracic aorta"),
    "Subcutaneous Emphysema": ("subcutaneous emphysema",),
    "Pneumomediastinum": ("pneumomediastinum",),
    "Pneumoperitoneum": ("pneumoperitoneum", "free air under the diaphragm"),
    "Emphysema": ("emphysema",),
    "Nodule": ("nodule", "pulmonary nodule"),
    "Mass": ("mass", "mediastinal mass"),
    "Hernia": ("hernia", "hiatal hernia"),
    "Lung Lesion": ("lung lesion",),
    "Fibrosis": ("fibrosis", "fibrotic changes"),
    "Pleural Other": ("pleural abnormality",),
    "Infiltration": ("infiltration",),
    "Pleural Effusion": ("pleural effusion",),
}


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    slots: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        found = SLOT_RE.findall(self.text)
        if sorted(found) != sorted(self.slots):
            raise ConfigError(f"template slots {found} do not match declared slots {sorted(self.slots)}")
        if len(set(found)) != len(found):
            raise ConfigError("each slot may appear only once in a template")

    @classmethod
    def from_dict(cls, data: Mapping) -> "PromptTemplate":
        slots = {k: (v,) if isinstance(v, str) else tuple(v) for k, v in data["slots"].items()}
        return cls(data["text"], slots)


@dataclass(frozen=True)
class PromptEntry:
    text: str
    labels: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]  # UTF-8 byte offsets, end exclusive

    def to_json(self) -> str:
        return json.dumps(
            {"text": self.text, "labels": list(self.labels), "spans": [list(s) for s in self.spans]},
            ensure_ascii=False,
        )

    def phrase(self, k: int) -> str:
        start, end = self.spans[k]
        return self.text.encode("utf-8")[start:end].decode("utf-8")


DEFAULT_TEMPLATES = (
    PromptTemplate(
        "«A» with calcifications is noted, which may be indicative of previous infection, as well as «B».",
        {"A": ("Pleural Thickening", "Fibrosis", "Pleural Other"),
         "B": ("Calcification of the Aorta", "Tortuous Aorta")},
    ),
    PromptTemplate(
        "«A» is seen in the soft tissues of the chest, extending from a «B».",
        {"A": ("Subcutaneous Emphysema",), "B": ("Pneumomediastinum",)},
    ),
    PromptTemplate(
        "«A» is noted. Rest looks normal.",
        {"A": ("Pleural Thickening", "Calcification of the Aorta", "Tortuous Aorta",
               "Subcutaneous Emphysema", "Pneumomediastinum", "Pneumoperitoneum", "Emphysema",
               "Nodule", "Mass", "Hernia", "Lung Lesion", "Fibrosis", "Pleural Other")},
    ),
    PromptTemplate(
        "Findings compatible with «A», in association with «B».",
        {"A": ("Mass", "Nodule", "Lung Lesion", "Emphysema"),
         "B": ("Hernia", "Pleural Effusion", "Infiltration")},
    ),
    PromptTemplate(
        "There is «A» below the diaphragm. No other abnormalities.",
        {"A": ("Pneumoperitoneum",)},
    ),
)


def _capitalize_first(text: str) -> str:
    return text[:1].upper() + text[1:]


def fill_template(
    template: PromptTemplate,
    binding: Mapping[str, str],
    phrases: Mapping[str, Sequence[str]] | None = None,
    rng: np.random.Generator | None = None,
) -> PromptEntry:
    """Substitute a phrase for each slot and record the byte span it occupies."""
    phrases = phrases if phrases is not None else DEFAULT_PHRASES
    out = bytearray()
    labels, spans = [], []
    pos = 0
    for m in SLOT_RE.finditer(template.text):
        out += template.text[pos:m.start()].encode("utf-8")
        label = binding[m.group(1)]
        options = phrases.get(label) or (label.lower(),)
        phrase = options[int(rng.integers(len(options)))] if rng is not None else options[0]
        if not out.strip():
            phrase = _capitalize_first(phrase)
        start = len(out)
        out += phrase.encode("utf-8")
        labels.append(label)
        spans.append((start, len(out)))
        pos = m.end()
    out += template.text[pos:].encode("utf-8")
    return PromptEntry(out.decode("utf-8"), tuple(labels), tuple(spans))


def generate_prompts(
    templates: Sequence[PromptTemplate],
    registry: LabelRegistry,
    category_map: CategoryMap,
    count: int,
    seed: int = 0,
    tail_labels: Iterable[str] | None = None,
    phrases: Mapping[str, Sequence[str]] | None = None,
) -> list[PromptEntry]:
    """Sample ``count`` prompts, each targeting one uniformly drawn tail label.

    ``tail_labels`` defaults to every Tail label in ``category_map``. A template
    is then drawn among those able to express the target; its remaining slots
    get random admissible labels distinct from those already used.
    """
    if count < 0:
        raise ConfigError("count must be non-negative")
    tail_names = [registry.labels[i] for i in category_map.indices(Category.TAIL)]
    if tail_labels is not None:
        requested = [registry.resolve(x) or x for x in tail_labels]
        not_tail = [x for x in requested if x not in tail_names]
        if not_tail:
            raise ConfigError(f"requested labels are not Tail: {not_tail}")
        tail_names = requested
    if not tail_names:
        raise CoverageError("category map has no Tail labels")

    norm_templates = []
    for t in templates:
        slots = {}
        for slot, labels in t.slots.items():
            resolved = []
            for x in labels:
                name = registry.resolve(x)
                if name is None:
                    raise ConfigError(f"template names unknown label {x!r}")
                resolved.append(name)
            slots[slot] = tuple(resolved)
        norm_templates.append(PromptTemplate(t.text, slots))

    can_express = {
        label: [t for t in norm_templates if any(label in v for v in t.slots.values())]
        for label in tail_names
    }
    uncovered = [label for label, ts in can_express.items() if not ts]
    if uncovered:
        raise CoverageError(f"no template covers tail labels {uncovered}")

    rng = np.random.default_rng(seed)
    entries = []
    for _ in range(count):
        target = tail_names[int(rng.integers(len(tail_names)))]
        options = can_express[target]
        template = options[int(rng.integers(len(options)))]
        target_slots = [s for s, v in template.slots.items() if target in v]
        chosen = target_slots[int(rng.integers(len(target_slots)))]
        binding = {chosen: target}
        for slot, admissible in template.slots.items():
            if slot == chosen:
                continue
            free = [x for x in admissible if x not in binding.values()] or list(admissible)
            binding[slot] = free[int(rng.integers(len(free)))]
        entries.append(fill_template(template, binding, phrases, rng))
    return entries


def write_prompt_manifest(entries: Iterable[PromptEntry], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")
    return path


def read_prompt_manifest(path: str | Path) -> list[PromptEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                entries.append(PromptEntry(d["text"], tuple(d["labels"]), tuple(tuple(s) for s in d["spans"])))
    return entries


def load_templates(path: str | Path) -> list[PromptTemplate]:
    """Templates from a YAML/JSON list of ``{text, slots}`` mappings."""
    import yaml

    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    return [PromptTemplate.from_dict(d) for d in data]
