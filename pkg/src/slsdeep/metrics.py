"""ISBI challenge scores: accuracy, Dice, Jaccard, sensitivity, specificity."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor

METRIC_NAMES = ("ACC", "DIC", "JAC", "SEN", "SPE")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass
class ImageMetrics:
    acc: float
    dic: float
    jac: float
    sen: float
    spe: float
    counts: ConfusionCounts
    name: Optional[str] = None

    def scores(self) -> dict:
        return {"ACC": self.acc, "DIC": self.dic, "JAC": self.jac, "SEN": self.sen, "SPE": self.spe}


@dataclass
class MetricsReport:
    acc: float
    dic: float
    jac: float
    sen: float
    spe: float
    counts: ConfusionCounts
    per_image: list = field(default_factory=list)
    aggregation: str = "per_image_mean"

    def scores(self) -> dict:
        return {"ACC": self.acc, "DIC": self.dic, "JAC": self.jac, "SEN": self.sen, "SPE": self.spe}

    def to_json(self) -> dict:
        """Document following ``REPORT_SCHEMA``."""
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "aggregation": self.aggregation,
            "aggregate": self.scores(),
            "counts": asdict(self.counts),
            "per_image": [
                {"image": m.name, **m.scores(), "counts": asdict(m.counts)} for m in self.per_image
            ],
        }


def _as_binary(mask, what: str) -> np.ndarray:
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if arr.dtype == bool:
        return arr
    bad = (arr != 0) & (arr != 1)
    if bad.any():
        raise ValueError(f"{what} mask must be binary (0/1); found value {arr[bad].flat[0]!r}")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    # Empty denominator means nothing to get wrong: score 1.0.
    return 1.0 if den == 0 else num / den


def metrics_from_counts(c: ConfusionCounts, name: Optional[str] = None) -> ImageMetrics:
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    return ImageMetrics(
        acc=(c.tp + c.tn) / c.total,
        dic=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        jac=_ratio(c.tp, c.tp + c.fp + c.fn),
        sen=_ratio(c.tp, c.tp + c.fn),
        spe=_ratio(c.tn, c.tn + c.fp),
        counts=c,
        name=name,
    )


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Foreground mask (uint8 0/1) where the foreground probability is >= threshold.

    Accepts (N, 2, H, W) softmax output (channel 1 is foreground), (N, 1, H, W)
    or any array of foreground probabilities.
    """
    arr = prob.data if isinstance(prob, Tensor) else np.asarray(prob, dtype=float)
    if arr.ndim == 4 and arr.shape[1] == 2:
        arr = arr[:, 1:2]
    if np.isnan(arr).any() or arr.min(initial=0.0) < 0 or arr.max(initial=0.0) > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    return (arr >= threshold).astype(np.uint8)


def evaluate_dataset(pairs: Sequence, names: Optional[Sequence[str]] = None,
                     aggregation: str = "per_image_mean") -> MetricsReport:
    """Per-image scores plus their aggregate over ``pairs`` of (pred, gt) masks.

    ``aggregation="pixel_pooled"`` computes the aggregate from summed counts
    instead of averaging per-image scores.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_dataset needs at least one (prediction, ground truth) pair")
    if aggregation not in ("per_image_mean", "pixel_pooled"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    per_image = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    for k, (pred, gt) in enumerate(pairs):
        c = confusion(pred, gt)
        pooled = pooled + c
        per_image.append(metrics_from_counts(c, names[k] if names else None))
    if aggregation == "pixel_pooled":
        agg = metrics_from_counts(pooled)
        values = (agg.acc, agg.dic, agg.jac, agg.sen, agg.spe)
    else:
        # fsum keeps the mean independent of image order.
        values = tuple(
            math.fsum(getattr(m, k) for m in per_image) / len(per_image)
            for k in ("acc", "dic", "jac", "sen", "spe")
        )
    return MetricsReport(*values, counts=pooled, per_image=per_image, aggregation=aggregation)


REPORT_SCHEMA_VERSION = 1

_SCORES = {
    name: {"type": "number", "minimum": 0.0, "maximum": 1.0} for name in METRIC_NAMES
}
_COUNTS = {
    "type": "object",
    "properties": {k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "tn", "fn")},
    "required": ["tp", "fp", "tn", "fn"],
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "slsdeep metrics report",
    "type": "object",
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "aggregation": {"enum": ["per_image_mean", "pixel_pooled"]},
        "aggregate": {
            "type": "object",
            "properties": _SCORES,
            "required": list(METRIC_NAMES),
            "additionalProperties": False,
        },
        "counts": _COUNTS,
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"image": {"type": ["string", "null"]}, **_SCORES, "counts": _COUNTS},
                "required": ["image", *METRIC_NAMES, "counts"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["schema_version", "aggregation", "aggregate", "counts", "per_image"],
    "additionalProperties": False,
}
