"""Class-imbalance losses for single-channel lesion logits.

Every loss consumes raw logits and returns a scalar :class:`Tensor` whose
gradient flows back through the numerics tape. Reductions are means over all
pixels of the batch (BCE, Focal) or batch-wide soft counts (Dice, Tversky).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lesions import LESION_ORDER, NUM_LESIONS, LesionType
from .numerics import Tensor, as_tensor, sigmoid, softplus

LOSS_KINDS = ("weighted_bce", "focal", "dice", "tversky")

# positive-class weights of the published final configuration
PUBLISHED_POS_WEIGHTS: dict[LesionType, float] = {
    LesionType.DRUSEN: 135.0,
    LesionType.EXUDATE: 175.0,
    LesionType.HAEMORRHAGE: 386.0,
    LesionType.OTHER: 170.0,
    LesionType.SCAR: 550.0,
}

# per-lesion optima reported by the loss-parameter sweep
PUBLISHED_TVERSKY_ALPHA: dict[LesionType, float] = {
    LesionType.DRUSEN: 0.4,
    LesionType.EXUDATE: 0.4,
    LesionType.HAEMORRHAGE: 0.3,
    LesionType.OTHER: 0.4,
    LesionType.SCAR: 0.2,
}
PUBLISHED_FOCAL_GAMMA: dict[LesionType, float] = {
    LesionType.DRUSEN: 2.0,
    LesionType.EXUDATE: 3.0,
    LesionType.HAEMORRHAGE: 1.0,
    LesionType.OTHER: 3.0,
    LesionType.SCAR: 1.0,
}


@dataclass
class LossSpec:
    """Loss choice plus its parameters.

    ``pos_weight`` and ``alpha`` hold one value per lesion type in channel
    order. ``weights`` selects where BCE weights come from: ``"dataset"``
    (computed once over the training split), ``"batch"`` (recomputed per
    batch) or ``"fixed"`` (use ``pos_weight`` as given).
    """

    kind: str = "weighted_bce"
    pos_weight: list[float] = field(default_factory=lambda: [PUBLISHED_POS_WEIGHTS[t] for t in LESION_ORDER])
    alpha: list[float] = field(default_factory=lambda: [0.2] * NUM_LESIONS)
    gamma: float = 2.0
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    smooth: float = 1.0
    weights: str = "dataset"

    def __post_init__(self):
        self.pos_weight = [float(v) for v in self.pos_weight]
        self.alpha = [float(v) for v in self.alpha]
        self.validate()

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if len(self.pos_weight) != NUM_LESIONS or len(self.alpha) != NUM_LESIONS:
            raise ValueError(f"pos_weight and alpha need {NUM_LESIONS} entries")
        if any(w < 0 for w in self.pos_weight):
            raise ValueError("pos_weight must be >= 0")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha):
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if abs(self.tversky_alpha + self.tversky_beta - 1.0) > 1e-9:
            raise ValueError(f"tversky_alpha + tversky_beta must be 1, got {self.tversky_alpha + self.tversky_beta}")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")
        if self.weights not in ("dataset", "batch", "fixed"):
            raise ValueError(f"weights must be dataset, batch or fixed; got {self.weights!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pos_weight": list(self.pos_weight),
            "alpha": list(self.alpha),
            "gamma": self.gamma,
            "tversky_alpha": self.tversky_alpha,
            "tversky_beta": self.tversky_beta,
            "smooth": self.smooth,
            "weights": self.weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(**d)

    def __call__(self, logits: Tensor, target, lesion: LesionType | str | int) -> Tensor:
        i = LesionType.parse(lesion).channel
        if self.kind == "weighted_bce":
            return weighted_bce_loss(logits, target, self.pos_weight[i])
        if self.kind == "focal":
            return focal_loss(logits, target, self.alpha[i], self.gamma)
        if self.kind == "dice":
            return dice_loss(logits, target, self.smooth)
        return tversky_loss(logits, target, self.tversky_alpha, self.tversky_beta, self.smooth)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def count_pixels(masks) -> tuple[np.ndarray, np.ndarray]:
    """(num_pos, num_neg) per channel of a (B, C, H, W) binary mask batch."""
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    if m.ndim != 4:
        raise ValueError(f"expected masks of shape (B, C, H, W), got {m.shape}")
    pos = np.count_nonzero(m == 1, axis=(0, 2, 3)).astype(np.int64)
    neg = np.count_nonzero(m == 0, axis=(0, 2, 3)).astype(np.int64)
    return pos, neg


def pos_weights_from_counts(num_pos: Sequence[int], num_neg: Sequence[int]) -> list[float]:
    return [float(n) / float(p) if p > 0 else 0.0 for p, n in zip(num_pos, num_neg)]


def compute_pos_weights(masks) -> list[float]:
    """Background-to-foreground pixel ratio per channel; 0 where a channel is empty."""
    return pos_weights_from_counts(*count_pixels(masks))


def compute_focal_alphas(pos_weights: Sequence[float]) -> list[float]:
    w = np.asarray(pos_weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("positive weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("cannot normalise: all positive weights are zero")
    return list(w / total)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _target(target, like: Tensor) -> Tensor:
    t = as_tensor(target)
    if t.shape != like.shape:
        raise ValueError(f"target shape {t.shape} does not match logits {like.shape}")
    return Tensor(t.data.astype(like.dtype, copy=False))


def weighted_bce_loss(logits: Tensor, target, pos_weight: float) -> Tensor:
    """Mean of -[w t log s(z) + (1 - t) log(1 - s(z))] in logit form."""
    t = _target(target, logits)
    # -log s(z) = softplus(-z), -log(1 - s(z)) = softplus(z)
    per_pixel = softplus(-logits) * (t * pos_weight) + softplus(logits) * (1.0 - t)
    return per_pixel.mean()


def bce_loss(logits: Tensor, target) -> Tensor:
    return weighted_bce_loss(logits, target, 1.0)


def focal_loss(logits: Tensor, target, alpha: float, gamma: float) -> Tensor:
    t = _target(target, logits)
    p = sigmoid(logits)
    pos = (1.0 - p) ** gamma * softplus(-logits) * (t * alpha)
    neg = p**gamma * softplus(logits) * ((1.0 - t) * (1.0 - alpha))
    return (pos + neg).mean()


def _soft_counts(logits: Tensor, target) -> tuple[Tensor, Tensor, Tensor]:
    t = _target(target, logits)
    p = sigmoid(logits)
    tp = (p * t).sum()
    return tp, p.sum(), t.sum()


def dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    tp, sp, st = _soft_counts(logits, target)
    return 1.0 - (tp * 2.0 + smooth) / (sp + st + smooth)


def tversky_loss(logits: Tensor, target, tversky_alpha: float, tversky_beta: float, smooth: float = 1.0) -> Tensor:
    """1 - (TP + s) / (TP + a FP + b FN + s) with ``s = smooth / 2``.

    Halving the smoothing term keeps ``a = b = 0.5`` exactly equal to
    :func:`dice_loss` with the same ``smooth``.
    """
    tp, sp, st = _soft_counts(logits, target)
    fp = sp - tp
    fn = st - tp
    s = 0.5 * smooth
    return 1.0 - (tp + s) / (tp + fp * tversky_alpha + fn * tversky_beta + s)


def loss_spec_for_lesion_defaults(kind: str, lesion: LesionType | str, **overrides) -> LossSpec:
    """LossSpec with the published per-lesion Tversky alpha / Focal gamma filled in."""
    lesion = LesionType.parse(lesion)
    params: dict = {"kind": kind}
    if kind == "tversky":
        a = PUBLISHED_TVERSKY_ALPHA[lesion]
        params.update(tversky_alpha=a, tversky_beta=1.0 - a)
    elif kind == "focal":
        params.update(gamma=PUBLISHED_FOCAL_GAMMA[lesion])
    params.update(overrides)
    return LossSpec(**params)
