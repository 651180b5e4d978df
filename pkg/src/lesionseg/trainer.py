"""Per-lesion training loop: Adam, plateau LR schedule, best-by-Rank checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AugmentSpec, DatasetIndex, SampleSource, batches
from .lesions import LESION_ORDER, LesionType
from .losses import LossSpec, compute_focal_alphas, count_pixels, focal_loss, pos_weights_from_counts, weighted_bce_loss
from .metrics import LesionMetrics, evaluate_masks
from .model import PRESETS, SegModel, get_preset, load_weights, save_weights
from .numerics import Adam, NonFiniteError, Tensor, load_weights_file, no_grad, save_weights_file

HISTORY_COLUMNS = ("epoch", "train_loss", "val_dice", "val_f1", "val_rank", "lr", "val_loss")
BEST_WEIGHTS = "best.lseg"
LAST_STATE = "last.lseg"
STATE_FILE = "state.json"
HISTORY_FILE = "history.csv"
CONFIG_FILE = "config.json"


class TrainingAborted(NonFiniteError):
    """Training hit a non-finite loss; the last good checkpoint is kept."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lesion: str = "drusen"
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 25
    plateau_min_delta: float = 1e-4
    loss: LossSpec = field(default_factory=LossSpec)
    preset: str = "small"
    input_size: tuple[int, int] = (320, 320)
    threshold: float = 0.5
    seed: int = 0
    dropout: float = 0.0
    augment: AugmentSpec | None = field(default_factory=AugmentSpec)

    def __post_init__(self):
        self.lesion = LesionType.parse(self.lesion).value
        self.input_size = tuple(int(v) for v in self.input_size)
        if isinstance(self.loss, dict):
            self.loss = LossSpec.from_dict(self.loss)
        if isinstance(self.augment, dict):
            a = dict(self.augment)
            for k in ("crop_fraction_range", "scale_range", "contrast_range"):
                if k in a:
                    a[k] = tuple(a[k])
            self.augment = AugmentSpec(**a)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie strictly between 0 and 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if len(self.input_size) != 2 or min(self.input_size) < 32:
            raise ValueError("input_size must be (H, W) with both at least 32")
        get_preset(self.preset)

    @property
    def lesion_type(self) -> LesionType:
        return LesionType(self.lesion)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["input_size"] = list(self.input_size)
        d["augment"] = None if self.augment is None else asdict(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping for a monitored quantity that should decrease."""

    lr: float
    factor: float = 0.1
    patience: int = 25
    min_delta: float = 1e-4
    best: float = math.inf
    num_bad_epochs: int = 0
    num_reductions: int = 0


def scheduler_step(state: PlateauState, current_val_loss: float) -> float:
    """Record one epoch's validation loss; returns the learning rate for the next epoch."""
    if state.lr <= 0:
        raise ValueError("lr must be > 0")
    if current_val_loss < state.best - state.min_delta:
        state.best = current_val_loss
        state.num_bad_epochs = 0
    else:
        state.num_bad_epochs += 1
        if state.num_bad_epochs >= state.patience:
            state.lr *= state.factor
            state.num_bad_epochs = 0
            state.num_reductions += 1
    return state.lr


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def logit_threshold(threshold: float) -> float:
    """Logit cut equivalent to ``sigmoid(z) > threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    return math.log(threshold / (1.0 - threshold))


def predict(model: SegModel, images, threshold: float = 0.5) -> tuple[np.ndarray, list[bool]]:
    """Binary masks (B, H, W) and image labels (any foreground pixel)."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, np.float32))
    with no_grad():
        logits = model.forward(x, mode="eval")
    return masks_from_logits(logits.data, threshold)


def masks_from_logits(logits: np.ndarray, threshold: float) -> tuple[np.ndarray, list[bool]]:
    masks = logits[:, 0].astype(np.float64) > logit_threshold(threshold)
    return masks, [bool(m.any()) for m in masks]


@dataclass
class EvalResult:
    metrics: LesionMetrics
    loss: float
    pred_labels: list[bool]
    gt_labels: list[bool]

    @property
    def empty_image_positive_rate(self) -> float:
        """Share of lesion-free images on which something was predicted."""
        neg = [p for p, g in zip(self.pred_labels, self.gt_labels) if not g]
        return float(np.mean(neg)) if neg else 0.0


def evaluate_detailed(
    model: SegModel,
    source: SampleSource | DatasetIndex,
    lesion: LesionType | str,
    threshold: float = 0.5,
    loss_fn: Callable[[Tensor, Tensor], Tensor] | None = None,
    batch_size: int = 16,
    size: tuple[int, int] | None = None,
) -> EvalResult:
    lesion = LesionType.parse(lesion)
    if isinstance(source, DatasetIndex):
        source = SampleSource(source, size or (320, 320))
    ch = lesion.channel
    preds, gts = [], []
    loss_sum, n = 0.0, 0
    with no_grad():
        for images, masks, _ in batches(source, batch_size):
            logits = model.forward(images, mode="eval")
            target = masks.data[:, ch : ch + 1]
            if loss_fn is not None:
                loss_sum += float(loss_fn(logits, Tensor(target)).item()) * len(target)
            n += len(target)
            pm, _ = masks_from_logits(logits.data, threshold)
            preds.extend(pm)
            gts.extend(target[:, 0] > 0.5)
    metrics = evaluate_masks(lesion, preds, gts)
    return EvalResult(metrics, loss_sum / n if loss_fn else float("nan"), [bool(p.any()) for p in preds], [bool(g.any()) for g in gts])


def evaluate(model: SegModel, index, threshold: float = 0.5, lesion=None, batch_size: int = 16, size=None) -> LesionMetrics:
    """Dice over ROI images, F1 over all images, and Rank for one lesion type."""
    lesion = lesion if lesion is not None else model.lesion
    if lesion is None:
        raise ValueError("lesion type is required when the model does not carry one")
    return evaluate_detailed(model, index, lesion, threshold, None, batch_size, size).metrics


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_dice: float
    val_f1: float
    val_rank: float
    lr: float
    val_loss: float


def history_to_csv(rows: list[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in rows:
        w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def history_from_csv(text: str) -> list[HistoryRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(HistoryRow(int(rec["epoch"]), *(float(rec[c]) for c in HISTORY_COLUMNS[1:])))
    return rows


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    best_val_rank: float
    epoch: int
    config_hash: str
    history: list[HistoryRow]
    path: Path | None = None

    def model(self, config: TrainConfig) -> SegModel:
        m = SegModel(config.preset, config.dropout, config.seed, config.lesion)
        m.load_state_dict(self.state)
        return m.eval()

    @classmethod
    def load(cls, run_dir) -> "Checkpoint":
        run_dir = Path(run_dir)
        weights = run_dir / BEST_WEIGHTS
        info = json.loads((run_dir / (BEST_WEIGHTS + ".json")).read_text())
        history = history_from_csv((run_dir / HISTORY_FILE).read_text())
        return cls(load_weights_file(weights), info["best_val_rank"], info["epoch"], info["config_hash"], history, weights)


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_run_model(run_dir) -> tuple[SegModel, TrainConfig, Checkpoint]:
    run_dir = Path(run_dir)
    config = TrainConfig.from_dict(json.loads((run_dir / CONFIG_FILE).read_text()))
    ckpt = Checkpoint.load(run_dir)
    model = SegModel(config.preset, config.dropout, config.seed, config.lesion)
    load_weights(model, run_dir / BEST_WEIGHTS)
    return model.eval(), config, ckpt


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def resolve_loss(config: TrainConfig, train_source: SampleSource) -> LossSpec:
    """Fill dataset-derived weights into the loss spec when requested."""
    spec = config.loss
    if spec.weights != "dataset" or spec.kind not in ("weighted_bce", "focal"):
        return spec
    pos = np.zeros(len(LESION_ORDER), np.int64)
    neg = np.zeros(len(LESION_ORDER), np.int64)
    for i in range(len(train_source)):
        p, n = count_pixels(train_source[i].mask[None])
        pos += p
        neg += n
    weights = pos_weights_from_counts(pos, neg)
    d = spec.to_dict()
    d["pos_weight"] = weights
    if spec.kind == "focal":
        d["alpha"] = compute_focal_alphas(weights)
    return LossSpec.from_dict(d)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _loss_closure(spec: LossSpec, lesion: LesionType):
    def fn(logits: Tensor, target: Tensor) -> Tensor:
        if spec.weights == "batch" and spec.kind in ("weighted_bce", "focal"):
            p, n = count_pixels(target.data)
            w = pos_weights_from_counts(p, n)[0]
            if spec.kind == "weighted_bce":
                return weighted_bce_loss(logits, target, w)
            return focal_loss(logits, target, spec.alpha[lesion.channel], spec.gamma)
        return spec(logits, target, lesion)

    return fn


def _save_state(run_dir: Path, model: SegModel, opt: Adam, extra: dict) -> None:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
        arrays[f"adam.m.{i}"] = m
        arrays[f"adam.v.{i}"] = v
    save_weights_file(arrays, run_dir / LAST_STATE)
    _atomic_write_text(run_dir / STATE_FILE, json.dumps(extra, indent=2, sort_keys=True))


def _load_state(run_dir: Path, model: SegModel, opt: Adam) -> dict:
    arrays = load_weights_file(run_dir / LAST_STATE)
    model.load_state_dict({k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")})
    n = len(opt.params)
    if "adam.m.0" in arrays:
        opt.state.m = [arrays[f"adam.m.{i}"].copy() for i in range(n)]
        opt.state.v = [arrays[f"adam.v.{i}"].copy() for i in range(n)]
    return json.loads((run_dir / STATE_FILE).read_text())


def train(
    config: TrainConfig,
    train_index: DatasetIndex | SampleSource,
    val_index: DatasetIndex | SampleSource,
    out_dir=None,
    resume: bool = False,
    log: Callable[[str], None] | None = None,
) -> Checkpoint:
    """Train one lesion model; validate and possibly checkpoint after every epoch.

    With ``out_dir`` set, the best weights, their manifest, the history CSV
    and a resumable last-epoch state are written there atomically.
    """
    lesion = config.lesion_type
    ch = lesion.channel
    train_src = train_index if isinstance(train_index, SampleSource) else SampleSource(train_index, config.input_size)
    val_src = val_index if isinstance(val_index, SampleSource) else SampleSource(val_index, config.input_size)
    if len(train_src) == 0 or len(val_src) == 0:
        raise ValueError("training and validation sets must be non-empty")

    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(run_dir / CONFIG_FILE, json.dumps(config.to_dict(), indent=2, sort_keys=True))

    loss_spec = resolve_loss(config, train_src)
    loss_fn = _loss_closure(loss_spec, lesion)
    model = SegModel(config.preset, config.dropout, config.seed, lesion)
    opt = Adam(model.parameters(), lr=config.lr)
    sched = PlateauState(config.lr, config.plateau_factor, config.plateau_patience, config.plateau_min_delta)
    chash = config.config_hash()
    history: list[HistoryRow] = []
    best = Checkpoint({}, -math.inf, 0, chash, [], None)
    start_epoch = 1

    if resume and run_dir is not None and (run_dir / STATE_FILE).is_file():
        st = _load_state(run_dir, model, opt)
        if st["config_hash"] != chash:
            raise ValueError(f"cannot resume: run directory holds config {st['config_hash']}, not {chash}")
        opt.state.step = st["adam_step"]
        sched = PlateauState(**st["scheduler"])
        model._dropout_rng.bit_generator.state = st["dropout_rng"]
        history = history_from_csv((run_dir / HISTORY_FILE).read_text())
        start_epoch = st["epoch"] + 1
        if (run_dir / BEST_WEIGHTS).is_file():
            best = Checkpoint.load(run_dir)
        log and log(f"resuming at epoch {start_epoch}")

    for epoch in range(start_epoch, config.epochs + 1):
        lr = sched.lr
        opt.lr = lr
        model.train()
        total, count = 0.0, 0
        for step, (images, masks, ids) in enumerate(
            batches(train_src, config.batch_size, _epoch_seed(config.seed, epoch), config.augment)
        ):
            target = Tensor(masks.data[:, ch : ch + 1])
            logits = model.forward(images)
            loss = loss_fn(logits, target)
            value = float(loss.item())
            if not math.isfinite(value):
                kept = f"; best checkpoint from epoch {best.epoch} kept" if best.epoch else ""
                raise TrainingAborted(f"non-finite training loss at epoch {epoch}, batch {step} ({ids[0]}...){kept}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(ids)
            count += len(ids)
        train_loss = total / count

        res = evaluate_detailed(model, val_src, lesion, config.threshold, loss_fn, config.batch_size)
        m = res.metrics
        row = HistoryRow(epoch, train_loss, m.dice, m.f1, m.rank, lr, res.loss)
        history.append(row)
        scheduler_step(sched, res.loss)

        improved = m.rank > best.best_val_rank
        if improved:
            best = Checkpoint(model.state_dict(), m.rank, epoch, chash, list(history), None)
        if run_dir is not None:
            if improved:
                save_weights(
                    model,
                    run_dir / BEST_WEIGHTS,
                    {
                        "best_val_rank": m.rank,
                        "epoch": epoch,
                        "config_hash": chash,
                        "threshold": config.threshold,
                        "input_size": list(config.input_size),
                    },
                )
                best.path = run_dir / BEST_WEIGHTS
            _atomic_write_text(run_dir / HISTORY_FILE, history_to_csv(history))
            _save_state(
                run_dir,
                model,
                opt,
                {
                    "epoch": epoch,
                    "config_hash": chash,
                    "adam_step": opt.state.step,
                    "scheduler": asdict(sched),
                    "dropout_rng": model._dropout_rng.bit_generator.state,
                    "best_val_rank": best.best_val_rank,
                    "complete": epoch == config.epochs,
                },
            )
        if log:
            log(
                f"epoch {epoch:3d}  loss {train_loss:.4f}  val_loss {res.loss:.4f}  "
                f"dice {m.dice:.4f}  f1 {m.f1:.4f}  rank {m.rank:.4f}  lr {lr:.2e}" + ("  *" if improved else "")
            )

    best.history = list(history)
    return best


def run_is_complete(run_dir) -> bool:
    p = Path(run_dir) / STATE_FILE
    return p.is_file() and bool(json.loads(p.read_text()).get("complete"))


__all__ = [
    "Checkpoint",
    "EvalResult",
    "HistoryRow",
    "PRESETS",
    "PlateauState",
    "TrainConfig",
    "TrainingAborted",
    "evaluate",
    "evaluate_detailed",
    "predict",
    "scheduler_step",
    "train",
]
