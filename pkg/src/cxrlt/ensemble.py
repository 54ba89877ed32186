"""Element-wise averaging of post-sigmoid score matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cxrlt.errors import ConfigError, IncompatibleError
from cxrlt.scores import ScoreMatrix


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[str, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        if self.weights is not None:
            if len(self.weights) != len(self.members):
                raise ConfigError("one weight per ensemble member")
            if any(w <= 0 for w in self.weights):
                raise ConfigError("ensemble weights must be positive")

    def normalized_weights(self) -> tuple[float, ...]:
        return _normalize(self.weights, len(self.members))


def _normalize(weights, n: int) -> tuple[float, ...]:
    if weights is None:
        return (1.0 / n,) * n
    weights = [float(w) for w in weights]
    if len(weights) != n:
        raise ConfigError(f"{len(weights)} weights for {n} matrices")
    if any(not w > 0 for w in weights):
        raise ConfigError("ensemble weights must be positive")
    total = sum(weights)
    return tuple(w / total for w in weights)


def average_scores(matrices: Sequence[ScoreMatrix], weights: Sequence[float] | None = None) -> ScoreMatrix:
    """Weighted element-wise mean of probability matrices (uniform by default).

    Terms are summed in sorted order per element so the result does not depend
    on member order, and clipped to the members' element-wise range to keep
    rounding from leaving it.
    """
    if not matrices:
        raise ConfigError("nothing to average")
    first = matrices[0]
    for m in matrices[1:]:
        if m.labels != first.labels:
            raise IncompatibleError("score matrices are bound to different label orders")
        if m.image_refs != first.image_refs:
            raise IncompatibleError("score matrices cover different samples or row orders")
        if m.shape != first.shape:
            raise IncompatibleError("score matrix shapes differ")
    w = _normalize(weights, len(matrices))
    if len(matrices) == 1:
        return ScoreMatrix(first.image_refs, first.labels, first.values.copy())
    stack = np.stack([m.values for m in matrices])
    terms = np.sort(stack * np.asarray(w)[:, None, None], axis=0)
    out = terms.sum(axis=0)
    out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    return ScoreMatrix(first.image_refs, first.labels, out)
