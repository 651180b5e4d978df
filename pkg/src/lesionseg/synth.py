"""Deterministic synthetic fundus-like dataset with controllable class imbalance.

Each image is a dark frame holding a disk-shaped "retina" with a smooth
reddish background, a bright optic-disc distractor and Gaussian noise.
Lesions are filled ellipses whose colour shift is specific to the lesion
type, so every per-lesion model has a learnable signal. Masks are written
as foreground 0 on background 255, which is what the loader expects.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DataError, DatasetIndex, IndexEntry, load_mask_channel
from .lesions import LESION_ORDER, LesionType
from .losses import pos_weights_from_counts

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class LesionStyle:
    """Appearance and frequency of one lesion type in lesion-bearing images."""

    presence: float  # probability the type appears in a lesion-bearing image
    count: tuple[int, int]  # inclusive range of blobs per image
    radius: tuple[float, float]  # semi-axis range as a fraction of image size
    color: tuple[float, float, float]  # RGB shift added inside the blob

    def __post_init__(self):
        if not 0.0 <= self.presence <= 1.0:
            raise ValueError("presence must lie in [0, 1]")
        if self.count[0] < 1 or self.count[0] > self.count[1]:
            raise ValueError(f"blob count range must be ordered and >= 1, got {self.count}")
        if self.radius[0] <= 0 or self.radius[0] > self.radius[1]:
            raise ValueError(f"radius range must be ordered and positive, got {self.radius}")


DEFAULT_STYLES: dict[LesionType, LesionStyle] = {
    LesionType.DRUSEN: LesionStyle(0.55, (2, 4), (0.035, 0.055), (0.30, 0.28, -0.08)),
    LesionType.EXUDATE: LesionStyle(0.55, (1, 3), (0.040, 0.065), (0.32, 0.34, 0.38)),
    LesionType.HAEMORRHAGE: LesionStyle(0.55, (1, 2), (0.050, 0.080), (-0.28, -0.20, -0.10)),
    LesionType.OTHER: LesionStyle(0.50, (1, 2), (0.050, 0.080), (-0.30, 0.22, 0.30)),
    LesionType.SCAR: LesionStyle(0.50, (1, 1), (0.070, 0.100), (0.25, -0.18, 0.35)),
}


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 0
    image_size: int = 160
    lesion_free_fraction: float = 0.71
    styles: dict = field(default_factory=lambda: dict(DEFAULT_STYLES))
    noise: float = 0.02
    contrast: float = 1.0  # multiplies every lesion colour shift
    mimics: float = 0.0  # mean number of unlabelled lesion-like blobs per image
    mimic_strength: float = 0.5  # their colour shift relative to a real lesion
    mimic_tint: tuple = (0.0, 0.0, 0.0)  # added to a mimic's colour shift
    mimic_soft: bool = True  # Gaussian profile instead of a sharp ellipse
    illumination: float = 0.0  # per-image random RGB gain spread
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("image counts must be non-negative")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.lesion_free_fraction <= 1.0:
            raise ValueError("lesion_free_fraction must lie in [0, 1]")
        if self.noise < 0 or self.contrast <= 0:
            raise ValueError("noise must be >= 0 and contrast > 0")
        if self.mimics < 0 or self.mimic_strength < 0:
            raise ValueError("mimics and mimic_strength must be >= 0")
        if len(self.mimic_tint) != 3:
            raise ValueError("mimic_tint needs three RGB components")
        object.__setattr__(self, "mimic_tint", tuple(float(v) for v in self.mimic_tint))
        styles = {LesionType.parse(k): (v if isinstance(v, LesionStyle) else LesionStyle(**v)) for k, v in self.styles.items()}
        missing = [t.value for t in LESION_ORDER if t not in styles]
        if missing:
            raise ValueError(f"styles missing for {missing}")
        object.__setattr__(self, "styles", styles)

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["styles"] = {t.value: asdict(s) for t, s in self.styles.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        styles = dict(DEFAULT_STYLES)
        for name, override in (d.pop("styles", None) or {}).items():
            t = LesionType.parse(name)
            fields = asdict(styles[t])
            fields.update(override)
            styles[t] = LesionStyle(
                float(fields["presence"]), tuple(fields["count"]), tuple(fields["radius"]), tuple(fields["color"])
            )
        return cls(styles=styles, **d)


def lesion_free_count(n: int, fraction: float) -> int:
    # small epsilon so 0.71 * 100 does not land on 70.99999
    return int(math.floor(n * fraction + 1e-9))


def _image_rng(seed: int, split: str, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLIT_IDS[split], i])


def _lesion_free_ids(spec: SynthSpec, split: str, n: int) -> set[int]:
    rng = np.random.default_rng([spec.seed, SPLIT_IDS[split], 2**31])
    k = lesion_free_count(n, spec.lesion_free_fraction)
    return set(int(i) for i in rng.permutation(n)[:k])


def _ellipse(size: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v <= 1.0


def _soft_ellipse(size: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> np.ndarray:
    """Gaussian bump with the ellipse's axes; no sharp edge, unlike a lesion."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return np.exp(-2.0 * (u * u + v * v))


def render(spec: SynthSpec, rng: np.random.Generator, with_lesions: bool) -> tuple[np.ndarray, dict[LesionType, np.ndarray]]:
    """One RGB image (H, W, 3) in [0, 1] and its foreground masks."""
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    centre = (n - 1) / 2.0
    radius = 0.47 * n
    r = np.hypot(yy - centre, xx - centre) / radius
    retina = r <= 1.0

    base = np.array([0.62, 0.30, 0.16]) * rng.uniform(0.9, 1.1)
    vignette = 1.0 - 0.35 * np.clip(r, 0, 1) ** 2
    # gentle linear illumination gradient
    gy, gx = rng.uniform(-0.08, 0.08, size=2)
    shade = vignette + gy * (yy - centre) / n + gx * (xx - centre) / n
    img = base[None, None, :] * shade[..., None]

    # optic-disc distractor: bright, slightly yellow, soft edge
    ang = rng.uniform(0, 2 * math.pi)
    dcy, dcx = centre + 0.5 * radius * math.sin(ang), centre + 0.5 * radius * math.cos(ang)
    disc_r = 0.09 * n
    disc = np.exp(-(((yy - dcy) ** 2 + (xx - dcx) ** 2) / (2 * disc_r**2)))
    img = img + disc[..., None] * np.array([0.22, 0.20, 0.10])

    # unlabelled look-alikes on every image, drawn before any lesion so the
    # lesion stream does not depend on whether mimics are enabled
    for _ in range(int(rng.poisson(spec.mimics)) if spec.mimics > 0 else 0):
        style = spec.styles[LESION_ORDER[int(rng.integers(len(LESION_ORDER)))]]
        ay = rng.uniform(*style.radius) * n
        ax = rng.uniform(*style.radius) * n
        rho = radius * 0.75 * math.sqrt(rng.random())
        phi = rng.uniform(0, 2 * math.pi)
        shape = _soft_ellipse if spec.mimic_soft else _ellipse
        bump = shape(n, centre + rho * math.sin(phi), centre + rho * math.cos(phi), ay, ax, rng.uniform(0, math.pi))
        tint = spec.mimic_strength * spec.contrast * np.asarray(style.color) + np.asarray(spec.mimic_tint)
        img = img + (bump * retina)[..., None] * tint

    masks: dict[LesionType, np.ndarray] = {}
    if with_lesions:
        present = [t for t in LESION_ORDER if rng.random() < spec.styles[t].presence]
        if not present:
            present = [LESION_ORDER[int(rng.integers(len(LESION_ORDER)))]]
        for t in present:
            style = spec.styles[t]
            m = np.zeros((n, n), dtype=bool)
            for _ in range(int(rng.integers(style.count[0], style.count[1] + 1))):
                ay = rng.uniform(*style.radius) * n
                ax = rng.uniform(*style.radius) * n
                # keep the blob well inside the retina
                rho = radius * 0.75 * math.sqrt(rng.random())
                phi = rng.uniform(0, 2 * math.pi)
                m |= _ellipse(n, centre + rho * math.sin(phi), centre + rho * math.cos(phi), ay, ax, rng.uniform(0, math.pi))
            m &= retina
            if m.any():
                masks[t] = m
                img = img + m[..., None] * (spec.contrast * np.asarray(style.color))

    if spec.illumination > 0:
        img = img * rng.uniform(1 - spec.illumination, 1 + spec.illumination, size=3)
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.where(retina[..., None], img, 0.02)
    return np.clip(img, 0.0, 1.0), masks


def _save_png(array: np.ndarray, path: Path, mode: str) -> None:
    try:
        Image.fromarray(array, mode=mode).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def generate(spec: SynthSpec, out_dir) -> dict[str, DatasetIndex]:
    """Write every non-empty split under ``out_dir``; returns the split indices.

    Manifests and the stats file are written last, so a failed run never
    leaves a manifest pointing at missing files.
    """
    out = Path(out_dir)
    indices: dict[str, DatasetIndex] = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    for split, n in spec.split_sizes().items():
        if n == 0:
            continue
        image_dir = out / split / "images"
        try:
            image_dir.mkdir(parents=True, exist_ok=True)
            for t in LESION_ORDER:
                (out / split / "masks" / t.value).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create directories under {out / split}: {exc}") from exc
        free = _lesion_free_ids(spec, split, n)
        entries = []
        width = max(4, len(str(n - 1)))
        for i in range(n):
            image_id = f"{split}_{i:0{width}d}"
            img, masks = render(spec, _image_rng(spec.seed, split, i), i not in free)
            image_path = image_dir / f"{image_id}.png"
            _save_png(np.round(img * 255).astype(np.uint8), image_path, "RGB")
            mask_paths = {}
            for t in LESION_ORDER:
                if t in masks:
                    p = out / split / "masks" / t.value / f"{image_id}.png"
                    _save_png(np.where(masks[t], 0, 255).astype(np.uint8), p, "L")
                    mask_paths[t] = p
                else:
                    mask_paths[t] = None
            entries.append(IndexEntry(image_id, image_path, mask_paths))
        indices[split] = DatasetIndex(split, entries, out)
    for split, index in indices.items():
        index.write_manifest(out / split / "manifest.csv")
    stats = {"spec": spec.to_dict(), "splits": {s: stats_to_dict(imbalance_stats(ix)) for s, ix in indices.items()}}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return indices


@dataclass(frozen=True)
class LesionStats:
    image_fraction: float  # share of images whose mask for this type is non-empty
    pixel_fraction: float  # mean over images of foreground / total pixels
    num_pos: int
    num_neg: int

    @property
    def pos_weight(self) -> float:
        return pos_weights_from_counts([self.num_pos], [self.num_neg])[0]


def imbalance_stats(index: DatasetIndex) -> dict[LesionType, LesionStats]:
    """Exact per-lesion image and pixel imbalance, counted from the mask files."""
    index.validate()
    n = len(index)
    sizes = []
    for e in index.entries:
        with Image.open(e.image_path) as img:
            sizes.append((img.height, img.width))
    out = {}
    for t in LESION_ORDER:
        with_lesion = 0
        frac_sum = 0.0
        pos = neg = 0
        for e, (h, w) in zip(index.entries, sizes):
            ch = load_mask_channel(e.mask_path(t), (h, w))
            k = int(np.count_nonzero(ch))
            with_lesion += k > 0
            frac_sum += k / (h * w)
            pos += k
            neg += h * w - k
        out[t] = LesionStats(with_lesion / n, frac_sum / n, pos, neg)
    return out


def stats_to_dict(stats: dict[LesionType, LesionStats]) -> dict:
    return {
        t.value: {
            "image_fraction": s.image_fraction,
            "pixel_fraction": s.pixel_fraction,
            "num_pos": s.num_pos,
            "num_neg": s.num_neg,
            "pos_weight": s.pos_weight,
        }
        for t, s in stats.items()
    }
