"""Command-line entry point (``cxrlt``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from cxrlt.errors import CxrltError, StageFailure


def _load(args):
    from cxrlt.config import load_config

    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def cmd_ingest(args) -> None:
    from cxrlt.data import write_manifest
    from cxrlt.pipeline import ingest

    config = _load(args)
    data = ingest(config)
    out = Path(args.out)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    data.document.save(out / "registry.json")
    for d in config.datasets:
        write_manifest(data.full[d.name], data.registry, out / "tables" / f"{d.name}.csv", d.name)
    print(out / "registry.json")


def cmd_split(args) -> None:
    from cxrlt.pipeline import ingest

    config = _load(args)
    data = ingest(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, assignment in data.splits.items():
        # record indices follow manifest row order
        (out / f"{name}.json").write_text(json.dumps(assignment.to_dict(data.full[name]), indent=2) + "\n", encoding="utf-8")
    print(out)


def cmd_train(args) -> None:
    from cxrlt.pipeline import ingest, new_run_dir, train_model

    config = _load(args)
    data = ingest(config)
    run_dir = new_run_dir(args.out or config.output_dir)
    (run_dir / "config.resolved.yaml").write_text(config.to_yaml(), encoding="utf-8")
    data.document.save(run_dir / "registry.json")
    cache: dict = {}
    for m in config.models:
        train_model(config, data, m, run_dir, cache, args.stage)
    print(run_dir)


def cmd_predict(args) -> None:
    from cxrlt.data import parse_manifest
    from cxrlt.labels import RegistryDocument
    from cxrlt.training import Checkpoint, init_from, predict

    doc = RegistryDocument.load(args.registry)
    ckpt = Checkpoint.load(args.checkpoint)
    table = parse_manifest(args.manifest, doc.registry, args.dataset)
    model = init_from(ckpt, ckpt.model_spec)
    scores = predict(model, table, args.image_size or ckpt.model_spec.image_size, args.mean, args.std)
    print(scores.save(args.out))


def cmd_ensemble(args) -> None:
    from cxrlt.ensemble import average_scores
    from cxrlt.scores import ScoreMatrix

    members = [ScoreMatrix.load(p) for p in args.scores]
    print(average_scores(members, args.weights).save(args.out))


def cmd_evaluate(args) -> None:
    from cxrlt.data import parse_manifest
    from cxrlt.labels import RegistryDocument
    from cxrlt.metrics import CategorySpec, evaluate
    from cxrlt.scores import ScoreMatrix, sample_keys
    from cxrlt.errors import IncompatibleError

    doc = RegistryDocument.load(args.registry)
    table = parse_manifest(args.manifest, doc.registry, args.dataset)
    scores = ScoreMatrix.load(args.scores)
    if scores.image_refs != sample_keys(table.records):
        raise IncompatibleError("score rows do not match the manifest rows")
    truth = table.annotation_matrix()
    if args.per_study:
        from cxrlt.scores import aggregate_by_study

        scores, truth = aggregate_by_study(scores, truth)
    report = evaluate(scores, truth, doc.registry, CategorySpec.from_category_map(doc.category_map()))
    for path in report.save(args.out):
        print(path)


def cmd_report(args) -> None:
    from cxrlt.labels import RegistryDocument
    from cxrlt.metrics import EvalReport
    from cxrlt.report import plot_delta, plot_distribution, render_table

    reports = []
    for item in args.reports or ():
        name, _, path = item.partition("=")
        if not path:
            raise CxrltError(f"--reports expects name=path, got {item!r}")
        reports.append((name, EvalReport.load(path)))
    if reports:
        for path in render_table(reports, args.out):
            print(path)
    if args.delta:
        base, variant = (EvalReport.load(p) for p in args.delta)
        print(plot_delta(base, variant, None, Path(args.out).with_name(Path(args.out).name + "_delta.png")))
    if args.registry:
        doc = RegistryDocument.load(args.registry)
        dataset = args.dataset or doc.target
        print(plot_distribution(doc.registry, dataset, doc.thresholds, Path(args.out).with_name(Path(args.out).name + "_distribution.png")))


def cmd_prompts(args) -> None:
    from cxrlt.labels import RegistryDocument
    from cxrlt.prompts import DEFAULT_TEMPLATES, generate_prompts, load_templates, write_prompt_manifest

    doc = RegistryDocument.load(args.registry)
    templates = load_templates(args.templates) if args.templates else DEFAULT_TEMPLATES
    entries = generate_prompts(templates, doc.registry, doc.category_map(), args.count, args.seed or 0, args.labels)
    print(write_prompt_manifest(entries, args.out))


def cmd_pipeline(args) -> None:
    from cxrlt.pipeline import run_pipeline

    config = _load(args)
    result = run_pipeline(config, args.out, stop_after=args.stage)
    print(result.run_dir)


def cmd_toy(args) -> None:
    from cxrlt.toy import make_corpus, write_configs

    corpus = make_corpus(Path(args.out), seed=args.seed or 0)
    for path in write_configs(corpus, seed=args.seed or 0).values():
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxrlt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, out_required=True):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("ingest", help="parse manifests and write the registry and canonical tables")
    with_config(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="write patient-level split assignments")
    with_config(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run the stage chain for every configured model")
    with_config(p, out_required=False)
    p.add_argument("--stage", help="stop after this stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--image-size", type=int)
    p.add_argument("--mean", type=float, default=0.5)
    p.add_argument("--std", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="average score matrices")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="per-label AP and category means for a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--per-study", action="store_true", help="average view scores within each study directory")
    p.add_argument("--out", required=True, help="output stem; .csv and .json are written")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render result tables and figures")
    p.add_argument("--reports", nargs="*", metavar="NAME=PATH")
    p.add_argument("--delta", nargs=2, metavar=("BASE", "VARIANT"))
    p.add_argument("--registry")
    p.add_argument("--dataset")
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("prompts", help="write a prompt manifest for synthetic generation")
    p.add_argument("--registry", required=True)
    p.add_argument("--templates")
    p.add_argument("--labels", nargs="*")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("pipeline", help="run ingest through report in a new run directory")
    with_config(p, out_required=False)
    p.add_argument("--stage", help="stop after this stage")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("toy", help="write the planted-pattern corpus and its configs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageFailure as exc:
        print(f"cxrlt {args.command}: stage {exc.stage} failed: {exc.__cause__ or exc}", file=sys.stderr)
        return 1
    except (CxrltError, OSError) as exc:
        print(f"cxrlt {args.command}: stage {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
