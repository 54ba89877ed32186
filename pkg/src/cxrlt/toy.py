"""Planted-pattern corpus: small grayscale images whose labels are drawn shapes.

Three datasets share an 8-label vocabulary. Two pretraining sets annotate
overlapping subsets with plentiful positives; the target set annotates all
eight with long-tailed positive counts, and the last two labels exist only
there. A separately generated holdout set of the target is used for scoring.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from PIL import Image

TOY_LABELS = ("Disk", "Bar", "Ring", "Cross", "Square", "Triangle", "Diamond", "Column")
TOY_SIDE = 64
# Target positives per label: head / medium / tail / tail-unique bands.
TARGET_COUNTS = (400, 400, 100, 100, 25, 25, 10, 10)
TOY_THRESHOLDS = {"head_min": 200, "medium_min": 50}


@dataclass(frozen=True)
class ToyDataset:
    name: str
    covered: tuple[int, ...]
    n_images: int
    positives: tuple[int, ...]  # per label, including unannotated ones
    patient_offset: int


def _grid(side):
    yy, xx = np.mgrid[0:side, 0:side]
    return yy.astype(np.float32), xx.astype(np.float32)


def draw_shape(canvas: np.ndarray, label: int, cy: float, cx: float, scale: float) -> None:
    """Brighten the pixels of shape ``label`` centred at (cy, cx)."""
    yy, xx = _grid(canvas.shape[0])
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    s = scale
    if label == 0:  # filled disk
        mask = r <= 4.0 * s
    elif label == 1:  # horizontal bar
        mask = (np.abs(dy) <= 1.5 * s) & (np.abs(dx) <= 7.0 * s)
    elif label == 2:  # ring
        mask = (r <= 6.0 * s) & (r >= 4.0 * s)
    elif label == 3:  # plus sign
        mask = ((np.abs(dy) <= 1.0 * s) & (np.abs(dx) <= 6.0 * s)) | ((np.abs(dx) <= 1.0 * s) & (np.abs(dy) <= 6.0 * s))
    elif label == 4:  # filled square
        mask = (np.abs(dy) <= 4.5 * s) & (np.abs(dx) <= 4.5 * s)
    elif label == 5:  # triangle pointing up
        mask = (dy <= 4.0 * s) & (dy >= -5.0 * s) & (np.abs(dx) <= (dy + 5.0 * s) * 0.6)
    elif label == 6:  # diamond outline
        d = np.abs(dy) + np.abs(dx)
        mask = (d <= 7.0 * s) & (d >= 5.0 * s)
    elif label == 7:  # vertical column
        mask = (np.abs(dx) <= 1.5 * s) & (np.abs(dy) <= 7.0 * s)
    else:
        raise ValueError(f"no shape for label {label}")
    canvas[mask] += 0.45


def render(labels: Sequence[int], rng: np.random.Generator, side: int = TOY_SIDE) -> np.ndarray:
    yy, xx = _grid(side)
    base = 0.25 + 0.1 * np.exp(-(((xx - side / 2) / (side / 3)) ** 2))
    canvas = base + rng.normal(0.0, 0.06, size=(side, side)).astype(np.float32)
    margin = 9
    for label in labels:
        cy, cx = rng.uniform(margin, side - margin, size=2)
        draw_shape(canvas, label, cy, cx, rng.uniform(0.85, 1.15))
    return np.clip(canvas, 0.0, 1.0)


def _positive_matrix(n: int, positives: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    mat = np.zeros((n, len(positives)), dtype=bool)
    for j, k in enumerate(positives):
        mat[rng.choice(n, size=min(k, n), replace=False), j] = True
    return mat


def _write_dataset(root: Path, ds: ToyDataset, rng: np.random.Generator, manifest_name: str | None = None) -> Path:
    img_dir = root / "images" / (manifest_name or ds.name)
    img_dir.mkdir(parents=True, exist_ok=True)
    pos = _positive_matrix(ds.n_images, ds.positives, rng)
    # 1-3 images per patient
    patient, pid, left = [], ds.patient_offset, 0
    for _ in range(ds.n_images):
        if left == 0:
            pid += 1
            left = int(rng.integers(1, 4))
        patient.append(f"p{pid:05d}")
        left -= 1
    manifest = root / f"{manifest_name or ds.name}.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "patient_id", "view", *(TOY_LABELS[j] for j in ds.covered)])
        for i in range(ds.n_images):
            labels = np.flatnonzero(pos[i]).tolist()
            arr = render(labels, rng)
            rel = f"images/{manifest_name or ds.name}/{i:05d}.png"
            Image.fromarray((arr * 255).round().astype(np.uint8), mode="L").save(root / rel)
            w.writerow([rel, patient[i], "PA", *(int(pos[i, j]) for j in ds.covered)])
    return manifest


def write_synthetic(root: Path, n_images: int, labels: Sequence[int], seed: int, name: str = "synthetic") -> Path:
    """Synthetic target samples, each showing one tail shape; only that label is annotated."""
    rng = np.random.default_rng(seed)
    img_dir = root / "images" / name
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = root / f"{name}.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "patient_id", "view", *TOY_LABELS])
        for i in range(n_images):
            label = int(labels[i % len(labels)])
            arr = render([label], rng)
            rel = f"images/{name}/{i:05d}.png"
            Image.fromarray((arr * 255).round().astype(np.uint8), mode="L").save(root / rel)
            w.writerow([rel, "", "", *("1" if j == label else "" for j in range(len(TOY_LABELS)))])
    return manifest


def make_corpus(root: str | Path, seed: int = 0) -> Path:
    """Write images and manifests for the three toy datasets plus the target holdout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_pre = 800
    datasets = [
        # pretraining sets see some target-absent shapes only as unannotated content
        ToyDataset("toy_a", (0, 1, 2, 4), n_pre, (200, 200, 200, 60, 200, 60, 0, 0), 0),
        ToyDataset("toy_b", (0, 1, 3, 5), n_pre, (200, 200, 60, 200, 60, 200, 0, 0), 10000),
        ToyDataset("toy_target", tuple(range(8)), 1100, TARGET_COUNTS, 20000),
    ]
    for ds in datasets:
        _write_dataset(root, ds, rng)
    holdout = ToyDataset("toy_target", tuple(range(8)), 400, (40,) * 8, 30000)
    _write_dataset(root, holdout, rng, manifest_name="toy_target_holdout")
    return root


def pipeline_config(
    corpus: str | Path,
    chained: bool = True,
    seed: int = 0,
    models: Sequence[dict] | None = None,
    synthetic: str | None = None,
    pretrain_epochs: int = 4,
    finetune_epochs: int = 6,
    lr: float = 1e-3,
) -> dict:
    """Pipeline config (as a plain mapping) for the toy corpus."""
    corpus = Path(corpus)
    stages = []
    if chained:
        stages.append({
            "name": "pretrain",
            "train_table": ["toy_a:train", "toy_b:train"],
            "val_table": ["toy_a:val", "toy_b:val"],
            "epochs": pretrain_epochs,
            "base_lr": lr,
            "decay_every": 2,
            "decay_factor": 0.5,
            "batch_size": 32,
            "init": "random",
            "seed": seed,
        })
    finetune_train = ["toy_target:train"] + (["synthetic:all"] if synthetic else [])
    stages.append({
        "name": "finetune",
        "train_table": finetune_train,
        "val_table": ["toy_target:val"],
        "epochs": finetune_epochs,
        "base_lr": lr,
        "decay_every": 2,
        "decay_factor": 0.5,
        "batch_size": 32,
        "init": "previous" if chained else "random",
        "seed": seed,
    })
    datasets = [
        {"name": "toy_a", "manifest": str(corpus / "toy_a.csv"), "splits": {"train": 0.8, "val": 0.1, "test": 0.1}},
        {"name": "toy_b", "manifest": str(corpus / "toy_b.csv"), "splits": {"train": 0.8, "val": 0.1, "test": 0.1}},
        {
            "name": "toy_target",
            "manifest": str(corpus / "toy_target.csv"),
            "splits": {"train": 0.9, "val": 0.1},
            "holdout_manifest": str(corpus / "toy_target_holdout.csv"),
        },
    ]
    cfg = {
        "seed": seed,
        "image_size": TOY_SIDE,
        "registry": {"target": "toy_target", "thresholds": dict(TOY_THRESHOLDS)},
        "datasets": datasets,
        "models": list(models) if models else [{"name": "toy_cnn", "arch": "toy_cnn", "width": 16}],
        "stages": stages,
        "evaluation": {"table": "toy_target:holdout"},
    }
    if synthetic:
        cfg["synthetic"] = {"name": "synthetic", "manifest": str(synthetic), "dataset": "toy_target"}
    return cfg


def write_configs(corpus: str | Path, out_dir: str | Path | None = None, seed: int = 0) -> dict[str, Path]:
    out_dir = Path(out_dir or corpus)
    out_dir.mkdir(parents=True, exist_ok=True)
    # manifest paths relative to the config file keep the corpus relocatable
    rel = Path(os.path.relpath(Path(corpus).resolve(), out_dir.resolve()))
    paths = {}
    for name, chained in (("chained", True), ("baseline", False)):
        path = out_dir / f"{name}.yaml"
        path.write_text(yaml.safe_dump(pipeline_config(rel, chained, seed), sort_keys=False), encoding="utf-8")
        paths[name] = path
    return paths
