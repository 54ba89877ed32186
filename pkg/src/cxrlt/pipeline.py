"""End-to-end driver: ingest -> split -> stages -> predict -> ensemble -> evaluate -> report."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch

from cxrlt.config import EnsembleSection, PipelineConfig
from cxrlt.data import (
    DatasetTable,
    SplitAssignment,
    merge_datasets,
    mix_synthetic,
    parse_manifest,
    patient_split,
    read_manifest_header,
)
from cxrlt.ensemble import average_scores
from cxrlt.errors import ConfigError, StageFailure
from cxrlt.labels import (
    Category,
    DatasetDescriptor,
    LabelRegistry,
    RegistryDocument,
    build_registry,
)
from cxrlt.metrics import CategorySpec, EvalReport, evaluate
from cxrlt.models import ModelSpec
from cxrlt.report import plot_distribution, render_table
from cxrlt.scores import ScoreMatrix, aggregate_by_study
from cxrlt.training import (
    Checkpoint,
    GeneralistInit,
    RandomInit,
    history_csv,
    init_from,
    parse_init,
    predict,
    run_stage,
)

log = logging.getLogger(__name__)

STATUS_FILE = "status.json"


def param_digest(params: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Ingested:
    document: RegistryDocument
    tables: dict[str, DatasetTable] = field(default_factory=dict)  # "dataset:split" -> table
    splits: dict[str, SplitAssignment] = field(default_factory=dict)
    full: dict[str, DatasetTable] = field(default_factory=dict)  # dataset -> manifest-order table

    @property
    def registry(self) -> LabelRegistry:
        return self.document.registry

    def table(self, refs) -> DatasetTable:
        refs = [refs] if isinstance(refs, str) else list(refs)
        return merge_datasets([self.tables[r] for r in refs])


def ingest(config: PipelineConfig) -> Ingested:
    """Parse manifests, split by patient and build the registry with train-split counts."""
    descriptors = [DatasetDescriptor(d.name, read_manifest_header(d.manifest)) for d in config.datasets]
    registry = build_registry(descriptors, aliases=config.registry.aliases)

    tables: dict[str, DatasetTable] = {}
    splits: dict[str, SplitAssignment] = {}
    fulls: dict[str, DatasetTable] = {}
    counts: dict[str, dict[int, int]] = {}
    for d in config.datasets:
        full = fulls[d.name] = parse_manifest(d.manifest, registry, d.name)
        assignment = patient_split(full, list(d.splits.items()), config.seed)
        splits[d.name] = assignment
        for split_name in d.splits:
            tables[f"{d.name}:{split_name}"] = assignment.table(full, split_name)
        if d.holdout_manifest:
            tables[f"{d.name}:holdout"] = parse_manifest(d.holdout_manifest, registry, d.name)
        counting = tables.get(f"{d.name}:train", full)
        pos = counting.positive_counts()
        counts[d.name] = {i: int(pos[i]) for i in registry.coverage(d.name)}
    registry = registry.with_counts(counts)

    document = RegistryDocument(
        registry,
        config.registry.target,
        config.registry.category_thresholds(),
        dict(config.registry.categories) if config.registry.categories else None,
    )
    ingested = Ingested(document, tables, splits, fulls)

    if config.synthetic is not None:
        s = config.synthetic
        synthetic = parse_manifest(s.manifest, registry, s.dataset, synthetic=True)
        cmap = document.category_map()
        empty = DatasetTable((), registry.fingerprint, registry.labels)
        tables[f"{s.name}:all"] = mix_synthetic(empty, synthetic, cmap.indices(Category.TAIL))
    return ingested


def categories_for(document: RegistryDocument) -> CategorySpec:
    return CategorySpec.from_category_map(document.category_map())


def new_run_dir(out_dir: str | Path) -> Path:
    """Fresh ``run-<timestamp>-<n>`` directory; never reuses an existing one."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    n = 0
    while True:
        path = out_dir / f"run-{stamp}-{n:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1


def _write_status(run_dir: Path, **status) -> None:
    (run_dir / STATUS_FILE).write_text(json.dumps(status, indent=2) + "\n", encoding="utf-8")


def _resolve_init(stage, previous: Checkpoint | None):
    if stage.init == "previous":
        if previous is None:
            raise ConfigError(f"stage {stage.name!r} has no previous stage")
        return previous
    if stage.init == "random":
        return RandomInit(stage.seed)
    source = parse_init(stage.init)
    if isinstance(source, GeneralistInit):
        return GeneralistInit(source.source, stage.seed)
    return source


def train_model(
    config: PipelineConfig,
    data: Ingested,
    model_cfg,
    run_dir: Path,
    cache: dict,
    stop_after: str | None = None,
) -> Checkpoint:
    spec = ModelSpec(model_cfg.arch, len(data.registry), config.image_size, model_cfg.width)
    norm = config.normalization
    previous: Checkpoint | None = None
    for stage in config.stages:
        stage_dir = run_dir / "models" / model_cfg.name / stage.name
        stage_dir.mkdir(parents=True, exist_ok=True)
        try:
            source = _resolve_init(stage, previous)
            model = init_from(source, spec)
            init_info = {
                "source": getattr(source, "describe", lambda: "checkpoint")(),
                "params_sha256": param_digest(model.state_dict()),
                "missing": list(model.init_report.missing),
                "unexpected": list(model.init_report.unexpected),
            }
            (stage_dir / "init.json").write_text(json.dumps(init_info, indent=2) + "\n", encoding="utf-8")
            train = data.table(stage.train_table)
            val = data.table(stage.val_table) if stage.val_table else None
            ckpt, history = run_stage(
                stage, model, train, val,
                provenance=model.provenance_root,
                image_size=config.image_size, mean=norm.mean, std=norm.std, cache=cache,
                postmortem_dir=stage_dir / "postmortem",
            )
            ckpt_dir = ckpt.save(stage_dir / "checkpoint")
            (stage_dir / "history.csv").write_text(history_csv(history), encoding="utf-8")
            (stage_dir / "checkpoint.json").write_text(
                json.dumps({"params_sha256": param_digest(ckpt.params)}, indent=2) + "\n", encoding="utf-8"
            )
            # reload from disk so the next stage starts from exactly the saved bytes
            previous = Checkpoint.load(ckpt_dir)
        except Exception as exc:
            raise StageFailure(f"{model_cfg.name}/{stage.name}", exc) from exc
        if stop_after is not None and stage.name == stop_after:
            break
    return previous


@dataclass
class RunResult:
    run_dir: Path
    reports: dict[str, EvalReport]
    checkpoints: dict[str, Checkpoint]


def run_pipeline(
    config: PipelineConfig,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    stop_after: str | None = None,
) -> RunResult:
    """Execute the full pipeline into a new run directory.

    ``stop_after`` names a stage after which training stops; prediction and
    reporting are then skipped and the run is marked ``partial``.
    """
    if seed is not None:
        config = config.with_seed(seed)
    if stop_after is not None:
        config.stage(stop_after)
    run_dir = new_run_dir(out_dir or config.output_dir)
    (run_dir / "config.resolved.yaml").write_text(config.to_yaml(), encoding="utf-8")
    _write_status(run_dir, status="running")
    step = "ingest"
    try:
        data = ingest(config)
        data.document.save(run_dir / "registry.json")
        step = "split"
        split_dir = run_dir / "splits"
        split_dir.mkdir()
        for d in config.datasets:
            (split_dir / f"{d.name}.json").write_text(
                json.dumps(data.splits[d.name].to_dict(data.full[d.name]), indent=2) + "\n", encoding="utf-8"
            )

        cache: dict = {}
        checkpoints = {}
        for m in config.models:
            step = f"train:{m.name}"
            checkpoints[m.name] = train_model(config, data, m, run_dir, cache, stop_after)
        if stop_after is not None:
            _write_status(run_dir, status="partial", stopped_after=stop_after)
            return RunResult(run_dir, {}, checkpoints)

        step = "predict"
        eval_table = data.table(config.evaluation.table)
        score_dir = run_dir / "scores"
        score_dir.mkdir()
        scores: dict[str, ScoreMatrix] = {}
        for m in config.models:
            model = init_from(checkpoints[m.name], checkpoints[m.name].model_spec)
            scores[m.name] = predict(
                model, eval_table, config.image_size, config.normalization.mean, config.normalization.std, cache
            )
            scores[m.name].save(score_dir / f"{m.name}.csv")

        ensemble = config.ensemble
        if ensemble is None and len(config.models) > 1:
            ensemble = EnsembleSection(tuple(m.name for m in config.models))
        if ensemble is not None:
            step = "ensemble"
            members = [ScoreMatrix.load(score_dir / f"{name}.csv") for name in ensemble.members]
            avg = average_scores(members, ensemble.weights)
            avg.save(score_dir / f"{ensemble.name}.csv")
            scores[ensemble.name] = avg

        step = "evaluate"
        categories = categories_for(data.document)
        report_dir = run_dir / "reports"
        report_dir.mkdir()
        annotations = eval_table.annotation_matrix()
        reports = {}
        for name, sm in scores.items():
            truth = annotations
            if config.evaluation.aggregate == "study":
                sm, truth = aggregate_by_study(sm, annotations)
            reports[name] = evaluate(sm, truth, data.registry, categories)
            reports[name].save(report_dir / name)

        step = "report"
        render_table(list(reports.items()), run_dir / "table")
        if data.document.thresholds is not None:
            plot_distribution(data.registry, data.document.target, data.document.thresholds, run_dir / "distribution.png")
    except Exception as exc:
        failed = exc.stage if isinstance(exc, StageFailure) else step
        _write_status(run_dir, status="incomplete", failed_stage=failed, error=str(exc))
        if isinstance(exc, StageFailure):
            raise
        raise StageFailure(step, exc) from exc
    _write_status(run_dir, status="complete")
    return RunResult(run_dir, reports, checkpoints)
