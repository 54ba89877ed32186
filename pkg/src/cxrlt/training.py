"""Masked loss, step-decay schedule, stage execution, checkpoints and prediction."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch.utils.data import DataLoader, Dataset

from cxrlt.data import DEFAULT_MEAN, DEFAULT_STD, DatasetTable, load_image
from cxrlt.errors import (
    CheckpointLoadError,
    ConfigError,
    ContractError,
    ImageLoadError,
    IncompatibleError,
    TrainingDivergedError,
)
from cxrlt.metrics import macro_map
from cxrlt.models import ModelSpec, MultiLabelNet, build_model, reset_head, torchvision_imagenet_state
from cxrlt.scores import ScoreMatrix, sample_keys

log = logging.getLogger(__name__)

PARAMS_FILE = "params.safetensors"
META_FILE = "meta.json"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_map", "lr")


def masked_bce(logits: torch.Tensor, annotations: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over the known (0/1) entries only.

    ``annotations`` holds 1 / 0 / -1 (Unknown). Unknown entries are never
    gathered, so they contribute neither to the loss nor to the gradient. With
    no known entry the loss is an exact zero that still backpropagates (zeros).
    """
    if logits.shape != annotations.shape:
        raise ContractError(f"logits {tuple(logits.shape)} vs annotations {tuple(annotations.shape)}")
    known = annotations >= 0
    if not bool(known.any()):
        return logits.masked_fill(~known, 0.0).sum() * 0.0
    targets = annotations[known].to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits[known], targets, reduction="mean")


@dataclass(frozen=True)
class StageConfig:
    name: str
    train_table: tuple[str, ...] = ()
    val_table: tuple[str, ...] = ()
    epochs: int = 20
    base_lr: float = 1e-4
    decay_every: int = 5
    decay_factor: float = 0.5
    batch_size: int = 16
    init: str = "previous"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError(f"stage {self.name!r}: epochs must be positive")
        if self.batch_size <= 0:
            raise ConfigError(f"stage {self.name!r}: batch_size must be positive")
        if not self.base_lr > 0:
            raise ConfigError(f"stage {self.name!r}: base_lr must be positive")
        if self.decay_every <= 0:
            raise ConfigError(f"stage {self.name!r}: decay_every must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(f"stage {self.name!r}: decay_factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_table"], d["val_table"], d["betas"] = list(self.train_table), list(self.val_table), list(self.betas)
        return d


def lr_at(config: StageConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.base_lr * config.decay_factor ** (epoch // config.decay_every)


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    provenance: tuple[str, ...]
    epoch: int
    val_map: float | None
    seed: int
    model_spec: ModelSpec
    labels: tuple[str, ...] = ()

    def meta(self) -> dict:
        return {
            "provenance": list(self.provenance),
            "epoch": self.epoch,
            "val_map": self.val_map,
            "seed": self.seed,
            "model_spec": self.model_spec.to_dict(),
            "labels": list(self.labels),
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_file({k: v.contiguous() for k, v in self.params.items()}, str(directory / PARAMS_FILE))
        (directory / META_FILE).write_text(json.dumps(self.meta(), indent=2) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        try:
            meta = json.loads((directory / META_FILE).read_text(encoding="utf-8"))
            params = load_file(str(directory / PARAMS_FILE))
        except (OSError, ValueError) as exc:
            raise CheckpointLoadError(f"cannot read checkpoint {directory}: {exc}") from exc
        return cls(
            params,
            tuple(meta["provenance"]),
            int(meta["epoch"]),
            meta["val_map"],
            int(meta["seed"]),
            ModelSpec.from_dict(meta["model_spec"]),
            tuple(meta.get("labels", ())),
        )


@dataclass(frozen=True)
class RandomInit:
    seed: int = 0

    def describe(self) -> str:
        return f"random(seed={self.seed})"


@dataclass(frozen=True)
class GeneralistInit:
    """Backbone weights without a multi-label head.

    ``source`` is a safetensors file of bare backbone names or
    ``torchvision:imagenet`` for the torchvision ImageNet release.
    """

    source: str
    seed: int = 0

    def describe(self) -> str:
        return f"generalist:{self.source}"


@dataclass(frozen=True)
class InitReport:
    source: str
    loaded: tuple[str, ...]
    missing: tuple[str, ...]  # model names not provided by the source
    unexpected: tuple[str, ...]  # source names the model does not have


def save_generalist(model: MultiLabelNet, path: str | Path) -> Path:
    """Store the backbone alone, under bare (unprefixed) names."""
    state = {k[len("backbone."):]: v.detach().clone().contiguous()
             for k, v in model.state_dict().items() if k.startswith("backbone.")}
    save_file(state, str(path))
    return Path(path)


def _seeded_model(spec: ModelSpec, seed: int) -> MultiLabelNet:
    torch.manual_seed(seed)
    model = build_model(spec)
    reset_head(model, torch.Generator().manual_seed(seed))
    return model


def init_from(source, spec: ModelSpec) -> MultiLabelNet:
    """Construct a model for ``spec`` from a random seed, a generalist backbone or a checkpoint.

    The returned model carries ``init_report`` describing what was loaded and
    ``provenance_root`` naming the source.
    """
    if isinstance(source, (str, Path)):
        source = parse_init(str(source))

    if isinstance(source, RandomInit):
        model = _seeded_model(spec, source.seed)
        names = tuple(model.state_dict())
        model.init_report = InitReport(source.describe(), (), names, ())
        model.provenance_root = (source.describe(),)
        model.spec = spec
        return model

    if isinstance(source, GeneralistInit):
        model = _seeded_model(spec, source.seed)
        if source.source == "torchvision:imagenet":
            raw = torchvision_imagenet_state(spec.arch)
        else:
            try:
                raw = load_file(source.source)
            except (OSError, ValueError) as exc:
                raise CheckpointLoadError(f"cannot read generalist weights {source.source}: {exc}") from exc
        state = {f"backbone.{k}": v for k, v in raw.items() if not k.startswith("head.")}
        report = _load_matching(model, state, source.describe())
        reset_head(model, torch.Generator().manual_seed(source.seed))
        model.init_report = report
        model.provenance_root = (source.describe(),)
        model.spec = spec
        return model

    if isinstance(source, Checkpoint):
        if source.model_spec != spec:
            raise IncompatibleError(f"checkpoint spec {source.model_spec} does not match {spec}")
        model = build_model(spec)
        report = _load_matching(model, source.params, "checkpoint")
        if report.missing or report.unexpected:
            raise CheckpointLoadError(
                f"checkpoint does not cover the model: missing {report.missing}, unexpected {report.unexpected}"
            )
        model.init_report = report
        model.provenance_root = tuple(source.provenance)
        model.spec = spec
        return model

    raise ConfigError(f"unsupported init source {source!r}")


def parse_init(text: str):
    """``random`` / ``random:<seed>`` / ``generalist:<path>`` / checkpoint directory."""
    if text == "random":
        return RandomInit()
    if text.startswith("random:"):
        return RandomInit(int(text.split(":", 1)[1]))
    if text.startswith("generalist:"):
        return GeneralistInit(text.split(":", 1)[1])
    if text == "torchvision:imagenet":
        return GeneralistInit(text)
    path = Path(text)
    if path.is_dir():
        return Checkpoint.load(path)
    if path.suffix == ".safetensors":
        return GeneralistInit(str(path))
    raise ConfigError(f"cannot interpret init source {text!r}")


@torch.no_grad()
def _load_matching(model: torch.nn.Module, state: Mapping[str, torch.Tensor], source: str) -> InitReport:
    own = model.state_dict()
    loaded = []
    for name, tensor in state.items():
        if name not in own:
            continue
        if own[name].shape != tensor.shape:
            raise CheckpointLoadError(
                f"parameter {name!r}: shape {tuple(tensor.shape)} in source, {tuple(own[name].shape)} in model"
            )
        own[name].copy_(tensor)
        loaded.append(name)
    missing = tuple(k for k in own if k not in state)
    unexpected = tuple(k for k in state if k not in own)
    return InitReport(source, tuple(loaded), missing, unexpected)


def state_of(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class ImageTableDataset(Dataset):
    """Images and annotations of a table; decoded arrays can be shared through ``cache``."""

    def __init__(self, table: DatasetTable, side: int, mean: float = DEFAULT_MEAN,
                 std: float = DEFAULT_STD, cache: dict | None = None):
        self.table = table
        self.side = side
        self.mean = mean
        self.std = std
        self.cache = cache

    def __len__(self):
        return len(self.table)

    def image(self, i: int) -> np.ndarray:
        record = self.table.records[i]
        key = (str(record.image_path), self.side, self.mean, self.std)
        if self.cache is not None and key in self.cache:
            return self.cache[key]
        arr = load_image(record, self.side, self.mean, self.std)
        if self.cache is not None:
            self.cache[key] = arr
        return arr

    def __getitem__(self, i):
        return torch.from_numpy(self.image(i)), torch.from_numpy(self.table.records[i].annotations.astype(np.int64))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_map: float
    lr: float


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for h in history:
        w.writerow([h.epoch, repr(h.train_loss), repr(h.val_map), repr(h.lr)])
    return buf.getvalue()


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_map"]), float(r["lr"])) for r in rows]


def run_stage(
    stage: StageConfig,
    model: MultiLabelNet,
    train: DatasetTable,
    val: DatasetTable | None = None,
    *,
    provenance: Sequence[str] = (),
    image_size: int | None = None,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
    cache: dict | None = None,
    postmortem_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train ``model`` in place for one stage and return the best-validation checkpoint.

    Adam with the step-decay schedule and :func:`masked_bce`. The checkpoint
    kept is the epoch with the highest validation mAP (the last epoch when
    validation mAP is undefined throughout). Its provenance is ``provenance``
    followed by the stage name.
    """
    spec: ModelSpec | None = getattr(model, "spec", None)
    if spec is None:
        raise ConfigError("model has no spec; build it with init_from")
    side = image_size or spec.image_size
    if train.labels and len(train.labels) != model.num_labels:
        raise IncompatibleError("training table width differs from the model head")
    if not len(train):
        raise ConfigError(f"stage {stage.name!r} has an empty training table")

    torch.manual_seed(stage.seed)
    loader = DataLoader(
        ImageTableDataset(train, side, mean, std, cache),
        batch_size=stage.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(stage.seed),
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=stage.base_lr, betas=tuple(stage.betas), eps=stage.eps,
        weight_decay=stage.weight_decay,
    )
    chain = (*provenance, stage.name)
    history: list[EpochRecord] = []
    best_state, best_epoch, best_map = None, -1, -math.inf

    for epoch in range(stage.epochs):
        lr = lr_at(stage, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        epoch_start = state_of(model)
        loss_sum, known_total = 0.0, 0
        for batch, (x, y) in enumerate(loader):
            logits = model(x)
            loss = masked_bce(logits, y)
            if not torch.isfinite(loss):
                saved = None
                if postmortem_dir is not None:
                    current = state_of(model)
                    finite = all(bool(torch.isfinite(t).all()) for t in current.values() if t.is_floating_point())
                    state = current if finite else epoch_start
                    saved = Checkpoint(state, chain, epoch, None, stage.seed, spec, train.labels).save(postmortem_dir)
                raise TrainingDivergedError(
                    f"stage {stage.name!r}: non-finite loss at epoch {epoch}, batch {batch}", saved
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            n_known = int((y >= 0).sum())
            loss_sum += float(loss.detach()) * n_known
            known_total += n_known
        train_loss = loss_sum / known_total if known_total else 0.0

        val_map = math.nan
        if val is not None and len(val):
            scores = predict(model, val, side, mean, std, cache)
            val_map = macro_map(scores, val.annotation_matrix())
        history.append(EpochRecord(epoch, train_loss, val_map, lr))
        log.info("stage %s epoch %d loss %.5f val_mAP %.4f lr %.2e", stage.name, epoch, train_loss, val_map, lr)

        if not math.isnan(val_map) and val_map > best_map:
            best_state, best_epoch, best_map = state_of(model), epoch, val_map

    if best_state is None:
        best_state, best_epoch = state_of(model), stage.epochs - 1
        best_map_out = None
    else:
        best_map_out = best_map
    ckpt = Checkpoint(best_state, chain, best_epoch, best_map_out, stage.seed, spec, train.labels)
    return ckpt, history


@torch.no_grad()
def predict(
    model: MultiLabelNet,
    table: DatasetTable,
    image_size: int | None = None,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
    cache: dict | None = None,
    batch_size: int = 64,
) -> ScoreMatrix:
    """Sigmoid scores per record in table order, computed in eval mode."""
    spec = getattr(model, "spec", None)
    side = image_size or (spec.image_size if spec else None)
    if side is None:
        raise ConfigError("image size unknown")
    if table.labels and len(table.labels) != model.num_labels:
        raise IncompatibleError("model width differs from the table's registry")
    was_training = model.training
    model.eval()
    dataset = ImageTableDataset(table, side, mean, std, cache)
    out = []
    try:
        for start in range(0, len(table), batch_size):
            idx = range(start, min(start + batch_size, len(table)))
            images = []
            for i in idx:
                try:
                    images.append(torch.from_numpy(dataset.image(i)))
                except ImageLoadError as exc:
                    r = table.records[i]
                    raise ImageLoadError(r.image_ref, f"record {i} of dataset {r.dataset!r}: {exc}") from exc
            logits = model(torch.stack(images))
            out.append(torch.sigmoid(logits.double()).numpy())
    finally:
        model.train(was_training)
    values = np.concatenate(out) if out else np.zeros((0, model.num_labels))
    labels = table.labels or tuple(str(i) for i in range(model.num_labels))
    return ScoreMatrix(sample_keys(table.records), tuple(labels), values)
