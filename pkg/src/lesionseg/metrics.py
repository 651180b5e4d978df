"""Challenge-style evaluation: per-image Dice, image-level F1 and Rank.

Dice is averaged over images whose ground truth contains the lesion; F1 is
computed over all images from the "any predicted pixel" label; Rank is
``0.4 * F1 + 0.6 * Dice``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .lesions import LesionType

F1_WEIGHT = 0.4
DICE_WEIGHT = 0.6


def dice_per_image(pred_mask, gt_mask) -> float | None:
    """Dice of one binary mask pair, or ``None`` when the ground truth is empty."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    n_gt = int(np.count_nonzero(g))
    if n_gt == 0:
        return None
    inter = int(np.count_nonzero(p & g))
    return 2.0 * inter / (int(np.count_nonzero(p)) + n_gt)


def classify_from_mask(pred_mask) -> bool:
    return bool(np.any(np.asarray(pred_mask) == 1))


def confusion(pred_labels: Sequence[bool], gt_labels: Sequence[bool]) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) for image-level labels."""
    p = np.asarray(pred_labels, dtype=bool)
    g = np.asarray(gt_labels, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"label vectors differ in length: {p.shape} vs {g.shape}")
    return (
        int(np.count_nonzero(p & g)),
        int(np.count_nonzero(p & ~g)),
        int(np.count_nonzero(~p & g)),
        int(np.count_nonzero(~p & ~g)),
    )


def f1_over_images(pred_labels: Sequence[bool], gt_labels: Sequence[bool]) -> float:
    """Image-level F1; 1.0 when nothing is positive and nothing is predicted."""
    if len(pred_labels) == 0:
        raise ValueError("f1_over_images needs at least one image")
    tp, fp, fn, _ = confusion(pred_labels, gt_labels)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def rank(f1: float, dice: float) -> float:
    for name, v in (("f1", f1), ("dice", dice)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return F1_WEIGHT * f1 + DICE_WEIGHT * dice


def dataset_dice(per_image: Iterable[float | None]) -> float:
    """Mean Dice over images that were not skipped; 0 if every image was skipped."""
    vals = [d for d in per_image if d is not None]
    return float(np.mean(vals)) if vals else 0.0


def pooled_dice(preds: Iterable, gts: Iterable) -> float:
    """Pixel-pooled Dice over ROI images; alternative to the per-image mean."""
    inter = total = 0
    for p, g in zip(preds, gts):
        p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
        if not g.any():
            continue
        inter += int(np.count_nonzero(p & g))
        total += int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    return 2.0 * inter / total if total else 0.0


@dataclass
class LesionMetrics:
    lesion: LesionType
    dice: float
    f1: float
    rank: float
    n_roi_images: int
    n_total_images: int

    def __post_init__(self):
        self.lesion = LesionType.parse(self.lesion)
        if self.n_roi_images > self.n_total_images:
            raise ValueError("n_roi_images cannot exceed n_total_images")

    @classmethod
    def from_scores(cls, lesion, dice: float, f1: float, n_roi: int = 0, n_total: int = 0) -> "LesionMetrics":
        return cls(LesionType.parse(lesion), dice, f1, rank(f1, dice), n_roi, n_total)

    def to_dict(self) -> dict:
        return {
            "lesion": self.lesion.value,
            "dice": self.dice,
            "f1": self.f1,
            "rank": self.rank,
            "n_roi_images": self.n_roi_images,
            "n_total_images": self.n_total_images,
        }


def evaluate_masks(lesion, preds: Sequence, gts: Sequence) -> LesionMetrics:
    """Full protocol for one lesion type over paired binary masks."""
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    if not preds:
        raise ValueError("no images to evaluate")
    per_image = [dice_per_image(p, g) for p, g in zip(preds, gts)]
    pred_labels = [classify_from_mask(p) for p in preds]
    gt_labels = [classify_from_mask(g) for g in gts]
    dice = dataset_dice(per_image)
    f1 = f1_over_images(pred_labels, gt_labels)
    n_roi = sum(d is not None for d in per_image)
    return LesionMetrics(LesionType.parse(lesion), dice, f1, rank(f1, dice), n_roi, len(preds))


@dataclass
class MetricsReport:
    per_lesion: list[LesionMetrics]
    average: tuple[float, float, float]
    weighted_average: tuple[float, float, float]
    weights_used: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        names = ("dice", "f1", "rank")
        return {
            "per_lesion": [m.to_dict() for m in self.per_lesion],
            "average": dict(zip(names, self.average)),
            "weighted_average": dict(zip(names, self.weighted_average)),
            "weights_used": list(self.weights_used),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = [LesionMetrics(**m) for m in d["per_lesion"]]
        avg = d["average"]
        wavg = d["weighted_average"]
        return cls(
            per,
            (avg["dice"], avg["f1"], avg["rank"]),
            (wavg["dice"], wavg["f1"], wavg["rank"]),
            list(d.get("weights_used", [])),
        )

    def to_text(self) -> str:
        """Aligned table: one block of Dice/F1/Rank rows per lesion, then the averages."""
        lines = [f"{'Lesion':<18}{'Metric':<8}{'Value':>8}", "-" * 34]

        def block(label, dice, f1, rk):
            lines.append(f"{label:<18}{'Dice':<8}{dice:>8.4f}")
            lines.append(f"{'':<18}{'F1':<8}{f1:>8.4f}")
            lines.append(f"{'':<18}{'Rank':<8}{rk:>8.4f}")
            lines.append("-" * 34)

        for m in self.per_lesion:
            block(m.lesion.value.capitalize(), m.dice, m.f1, m.rank)
        block("Average", *self.average)
        block("Weighted average", *self.weighted_average)
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lesion", "metric", "value"])
        for m in self.per_lesion:
            for name in ("dice", "f1", "rank"):
                w.writerow([m.lesion.value, name, repr(getattr(m, name))])
        for label, vals in (("average", self.average), ("weighted_average", self.weighted_average)):
            for name, v in zip(("dice", "f1", "rank"), vals):
                w.writerow([label, name, repr(v)])
        return buf.getvalue()


def aggregate(per_lesion: Sequence[LesionMetrics], weights: Sequence[float] | None = None) -> MetricsReport:
    """Plain and count-weighted means of Dice, F1 and Rank across lesions.

    ``weights`` defaults to each lesion's ROI image count.
    """
    if not per_lesion:
        raise ValueError("aggregate needs at least one lesion")
    if weights is None:
        weights = [m.n_roi_images for m in per_lesion]
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(per_lesion),):
        raise ValueError(f"need {len(per_lesion)} weights, got {len(w)}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if w.sum() <= 0:
        raise ValueError("weights must not all be zero")
    table = np.array([[m.dice, m.f1, m.rank] for m in per_lesion], dtype=np.float64)
    avg = tuple(float(v) for v in table.mean(axis=0))
    wavg = tuple(float(v) for v in (w[:, None] * table).sum(axis=0) / w.sum())
    return MetricsReport(list(per_lesion), avg, wavg, [float(x) for x in w])

