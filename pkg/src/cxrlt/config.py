"""Pipeline configuration: strict YAML mapping onto dataclasses.

Unknown keys are errors. Field names match the dataclass fields one to one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from cxrlt.errors import ConfigError
from cxrlt.labels import CategoryThresholds
from cxrlt.training import StageConfig


def _strict(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    required = [
        f.name for f in dataclasses.fields(cls)
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    ]
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")
    return dict(data)


@dataclass(frozen=True)
class RegistrySection:
    target: str
    thresholds: Mapping[str, int] | None = None
    categories: Mapping[str, str] | None = None
    aliases: Mapping[str, str] = field(default_factory=dict)

    def category_thresholds(self) -> CategoryThresholds | None:
        if self.thresholds is None:
            return None
        _strict(CategoryThresholds, self.thresholds, "registry.thresholds")
        return CategoryThresholds(int(self.thresholds["head_min"]), int(self.thresholds["medium_min"]))


@dataclass(frozen=True)
class DatasetSection:
    name: str
    manifest: str
    splits: Mapping[str, float] = field(default_factory=lambda: {"all": 1.0})
    holdout_manifest: str | None = None


@dataclass(frozen=True)
class SyntheticSection:
    name: str
    manifest: str
    dataset: str


@dataclass(frozen=True)
class ModelSection:
    name: str
    arch: str
    width: int = 16


@dataclass(frozen=True)
class EnsembleSection:
    members: tuple[str, ...]
    weights: tuple[float, ...] | None = None
    name: str = "Averaged"


@dataclass(frozen=True)
class EvaluationSection:
    table: str
    aggregate: str = "image"  # "image" or "study"


@dataclass(frozen=True)
class NormalizationSection:
    mean: float = 0.5
    std: float = 0.25


@dataclass(frozen=True)
class PipelineConfig:
    registry: RegistrySection
    datasets: tuple[DatasetSection, ...]
    models: tuple[ModelSection, ...]
    stages: tuple[StageConfig, ...]
    evaluation: EvaluationSection
    seed: int = 0
    image_size: int = 448
    normalization: NormalizationSection = NormalizationSection()
    synthetic: SyntheticSection | None = None
    ensemble: EnsembleSection | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        if self.registry.target not in names:
            raise ConfigError(f"registry.target {self.registry.target!r} is not a configured dataset")
        if self.registry.thresholds is None and not self.registry.categories:
            raise ConfigError("registry needs thresholds or explicit categories")
        self.registry.category_thresholds()
        if not self.models:
            raise ConfigError("at least one model is required")
        model_names = [m.name for m in self.models]
        if len(set(model_names)) != len(model_names):
            raise ConfigError("model names must be unique")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        stage_names = [s.name for s in self.stages]
        if len(set(stage_names)) != len(stage_names):
            raise ConfigError("stage names must be unique")
        if self.stages[0].init == "previous":
            raise ConfigError(f"first stage {self.stages[0].name!r} cannot start from a previous stage")
        tables = self.table_names()
        for s in self.stages:
            if not s.train_table:
                raise ConfigError(f"stage {s.name!r} has no train_table")
            for ref in (*s.train_table, *s.val_table):
                if ref not in tables:
                    raise ConfigError(f"stage {s.name!r} references unknown table {ref!r}")
        if self.evaluation.table not in tables:
            raise ConfigError(f"evaluation.table {self.evaluation.table!r} is unknown")
        if self.evaluation.aggregate not in ("image", "study"):
            raise ConfigError("evaluation.aggregate must be 'image' or 'study'")
        if self.synthetic is not None and self.synthetic.dataset not in names:
            raise ConfigError("synthetic.dataset must name a configured dataset")
        if self.ensemble is not None:
            bad = [m for m in self.ensemble.members if m not in model_names]
            if bad:
                raise ConfigError(f"ensemble members {bad} are not configured models")
            if self.ensemble.weights is not None and len(self.ensemble.weights) != len(self.ensemble.members):
                raise ConfigError("one ensemble weight per member")
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")

    def table_names(self) -> set[str]:
        out = set()
        for d in self.datasets:
            out |= {f"{d.name}:{s}" for s in d.splits}
            if d.holdout_manifest:
                out.add(f"{d.name}:holdout")
        if self.synthetic is not None:
            out.add(f"{self.synthetic.name}:all")
        return out

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise ConfigError(f"no stage named {name!r}")

    def to_dict(self) -> dict:
        def conv(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [conv(x) for x in obj]
            if isinstance(obj, Mapping):
                return {k: conv(v) for k, v in obj.items()}
            return obj
        return conv(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override the global seed and every stage seed."""
        stages = tuple(dataclasses.replace(s, seed=seed) for s in self.stages)
        return dataclasses.replace(self, seed=seed, stages=stages)

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: str | Path | None = None) -> "PipelineConfig":
        d = _strict(cls, data, "config")
        base = Path(base_dir) if base_dir is not None else None

        def path(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str((base / p).resolve())

        d["registry"] = RegistrySection(**_strict(RegistrySection, d["registry"], "registry"))
        datasets = []
        for i, x in enumerate(d["datasets"]):
            x = _strict(DatasetSection, x, f"datasets[{i}]")
            x["manifest"] = path(x["manifest"])
            x["holdout_manifest"] = path(x.get("holdout_manifest"))
            if "splits" in x:
                x["splits"] = {str(k): float(v) for k, v in x["splits"].items()}
            datasets.append(DatasetSection(**x))
        d["datasets"] = tuple(datasets)
        d["models"] = tuple(ModelSection(**_strict(ModelSection, x, f"models[{i}]")) for i, x in enumerate(d["models"]))
        stages = []
        for i, x in enumerate(d["stages"]):
            x = _strict(StageConfig, x, f"stages[{i}]")
            for key in ("train_table", "val_table"):
                if key in x:
                    x[key] = (x[key],) if isinstance(x[key], str) else tuple(x[key])
            if "betas" in x:
                x["betas"] = tuple(float(b) for b in x["betas"])
            init = x.get("init")
            if init and init.startswith("generalist:"):
                x["init"] = "generalist:" + path(init.split(":", 1)[1])
            stages.append(StageConfig(**x))
        d["stages"] = tuple(stages)
        d["evaluation"] = EvaluationSection(**_strict(EvaluationSection, d["evaluation"], "evaluation"))
        if d.get("normalization") is not None:
            d["normalization"] = NormalizationSection(**_strict(NormalizationSection, d["normalization"], "normalization"))
        else:
            d.pop("normalization", None)
        if d.get("synthetic") is not None:
            s = _strict(SyntheticSection, d["synthetic"], "synthetic")
            s["manifest"] = path(s["manifest"])
            d["synthetic"] = SyntheticSection(**s)
        if d.get("ensemble") is not None:
            e = _strict(EnsembleSection, d["ensemble"], "ensemble")
            e["members"] = tuple(e["members"])
            if e.get("weights") is not None:
                e["weights"] = tuple(float(w) for w in e["weights"])
            d["ensemble"] = EnsembleSection(**e)
        return cls(**d)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return PipelineConfig.from_dict(data or {}, base_dir=path.parent)
