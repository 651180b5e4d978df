"""Image/mask loading, mask binarization, resizing, paired augmentation, batching.

Directory contract::

    <root>/<split>/images/<id>.png|jpg
    <root>/<split>/masks/<lesion>/<id>.png      (absent file = no lesion of that type)
    <root>/<split>/manifest.csv                  (optional: id + one 0/1 column per lesion)

Mask files are 8-bit grayscale with lesions drawn dark on a white (255)
background. Loading maps 255 to 1 and inverts, so 255 becomes background (0)
and every other value becomes foreground (1).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .lesions import LESION_ORDER, NUM_LESIONS, LesionType
from .numerics import Tensor

DEFAULT_SIZE = (320, 320)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    """Raised for missing, unreadable or malformed dataset files."""


# ---------------------------------------------------------------------------
# samples and specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (5, H, W) float32 in {0, 1}
    image_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != (NUM_LESIONS,) + self.image.shape[1:]:
            raise ValueError(f"mask must be ({NUM_LESIONS}, H, W) matching image, got {self.mask.shape}")
        self.image.setflags(write=False)
        self.mask.setflags(write=False)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def channel(self, lesion: LesionType | str | int) -> np.ndarray:
        return self.mask[LesionType.parse(lesion).channel]


@dataclass(frozen=True)
class AugmentSpec:
    max_rotation_deg: float = 10.0
    crop_fraction_range: tuple[float, float] = (0.9, 1.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.9, 1.1)
    enabled: bool = True

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        for name in ("crop_fraction_range", "scale_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} must be an ordered pair of positive numbers, got {(lo, hi)}")
        lo, hi = self.crop_fraction_range
        if hi > 1.0:
            raise ValueError("crop fraction cannot exceed 1")
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(enabled=False)

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), 0.0, (1.0, 1.0), True)


@dataclass(frozen=True)
class IndexEntry:
    image_id: str
    image_path: Path
    mask_paths: dict[LesionType, Path | None] = field(default_factory=dict)

    def mask_path(self, lesion: LesionType) -> Path | None:
        return self.mask_paths.get(lesion)

    def has_lesion(self, lesion: LesionType | str) -> bool:
        return self.mask_paths.get(LesionType.parse(lesion)) is not None


@dataclass
class DatasetIndex:
    split: str
    entries: list[IndexEntry]
    root: Path | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        if not self.entries:
            raise DataError(f"split {self.split!r} has no entries")
        for e in self.entries:
            if not e.image_path.is_file():
                raise DataError(f"missing image file {e.image_path}")
            for lesion, p in e.mask_paths.items():
                if p is not None and not p.is_file():
                    raise DataError(f"missing {lesion.value} mask file {p}")

    @classmethod
    def scan(cls, root, split: str) -> "DatasetIndex":
        """Index a split by listing its image directory."""
        root = Path(root)
        image_dir = root / split / "images"
        if not image_dir.is_dir():
            raise DataError(f"no image directory at {image_dir}")
        entries = []
        for path in sorted(image_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            image_id = path.stem
            masks = {}
            for lesion in LESION_ORDER:
                mp = root / split / "masks" / lesion.value / f"{image_id}.png"
                masks[lesion] = mp if mp.is_file() else None
            entries.append(IndexEntry(image_id, path, masks))
        index = cls(split, entries, root)
        index.validate()
        return index

    @classmethod
    def from_manifest(cls, root, split: str, manifest=None) -> "DatasetIndex":
        root = Path(root)
        manifest = Path(manifest) if manifest is not None else root / split / "manifest.csv"
        if not manifest.is_file():
            raise DataError(f"manifest not found: {manifest}")
        entries = []
        with manifest.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in ["id"] + [t.value for t in LESION_ORDER] if c not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{manifest}: missing columns {missing}")
            for row in reader:
                image_id = row["id"]
                image_path = _find_image(root / split / "images", image_id)
                masks = {}
                for lesion in LESION_ORDER:
                    present = row[lesion.value].strip() not in ("", "0", "false", "False")
                    masks[lesion] = root / split / "masks" / lesion.value / f"{image_id}.png" if present else None
                entries.append(IndexEntry(image_id, image_path, masks))
        index = cls(split, entries, root)
        index.validate()
        return index

    @classmethod
    def load(cls, root, split: str) -> "DatasetIndex":
        """Use the split's manifest when present, otherwise scan the directories."""
        if (Path(root) / split / "manifest.csv").is_file():
            return cls.from_manifest(root, split)
        return cls.scan(root, split)

    def write_manifest(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [t.value for t in LESION_ORDER])
            for e in self.entries:
                w.writerow([e.image_id] + [int(e.has_lesion(t)) for t in LESION_ORDER])


def _find_image(image_dir: Path, image_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        p = image_dir / f"{image_id}{suffix}"
        if p.is_file():
            return p
    raise DataError(f"no image for id {image_id!r} in {image_dir}")


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _pil_size(size: tuple[int, int]) -> tuple[int, int]:
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"size must be positive, got {size}")
    return (w, h)


def binarize_mask(pixels: np.ndarray, invert: bool = True) -> np.ndarray:
    """255 -> 1, everything else -> 0, then (by default) invert."""
    hit = pixels == 255
    return (~hit if invert else hit).astype(np.float32)


def load_mask_channel(path, target_size: tuple[int, int] | None, invert: bool = True) -> np.ndarray:
    """One binary lesion channel of shape (1, H, W).

    ``path`` of ``None`` yields zeros (``target_size`` is then required).
    """
    if path is None:
        if target_size is None:
            raise ValueError("target_size is required for an absent mask")
        h, w = target_size
        return np.zeros((1, h, w), np.float32)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"mask {path} is not 8-bit grayscale (mode {img.mode})")
            pixels = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    channel = binarize_mask(pixels, invert)
    if target_size is not None and channel.shape != tuple(target_size):
        channel = _resize_nearest(channel, target_size)
    return channel[None]


def load_image(path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    """RGB image as (3, H, W) float32 in [0, 1]; bilinear resize when requested."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if target_size is not None and (img.height, img.width) != tuple(target_size):
                img = img.resize(_pil_size(target_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_sample(entry: IndexEntry, size: tuple[int, int] | None = DEFAULT_SIZE, invert: bool = True) -> Sample:
    image = load_image(entry.image_path, size)
    hw = image.shape[1:]
    channels = [load_mask_channel(entry.mask_path(t), hw, invert) for t in LESION_ORDER]
    return Sample(image, np.concatenate(channels, axis=0), entry.image_id)


def assemble_mask(channels: dict[LesionType, np.ndarray], size: tuple[int, int]) -> np.ndarray:
    """Stack per-lesion binary channels in channel order; missing ones are zero."""
    h, w = size
    out = np.zeros((NUM_LESIONS, h, w), np.float32)
    for lesion, ch in channels.items():
        out[LesionType.parse(lesion).channel] = ch
    return out


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def _resize_nearest(channel: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    img = Image.fromarray(channel.astype(np.uint8))
    return np.asarray(img.resize(_pil_size(size), Image.NEAREST), dtype=np.float32)


def _resize_bilinear(channel: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    img = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(img.resize(_pil_size(size), Image.BILINEAR), dtype=np.float32)


def resize(sample: Sample, size: tuple[int, int]) -> Sample:
    """Bilinear for the image, nearest-neighbour for the mask."""
    _pil_size(size)
    if sample.size == tuple(size):
        return sample
    image = np.stack([_resize_bilinear(c, size) for c in sample.image])
    mask = np.stack([_resize_nearest(c, size) for c in sample.mask])
    return Sample(np.clip(image, 0.0, 1.0), mask, sample.image_id)


def _affine(spec: AugmentSpec, rng: np.random.Generator, size: tuple[int, int]):
    """Sample one geometric transform; returns (matrix, offset) mapping output to input coords."""
    h, w = size
    theta = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    crop = rng.uniform(*spec.crop_fraction_range)
    scale = rng.uniform(*spec.scale_range)
    # crop window centre may move anywhere the window still fits
    shift = np.array([rng.uniform(-1, 1) * (1 - crop) * h / 2, rng.uniform(-1, 1) * (1 - crop) * w / 2])
    c, s = math.cos(theta), math.sin(theta)
    matrix = (crop / scale) * np.array([[c, -s], [s, c]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre + shift - matrix @ centre
    return matrix, offset


def augment(sample: Sample, spec: AugmentSpec, rng_seed) -> Sample:
    """Paired geometric transform of image and mask, photometric jitter of the image."""
    if not spec.enabled:
        return sample
    rng = np.random.default_rng(rng_seed)
    matrix, offset = _affine(spec, rng, sample.size)
    brightness = rng.uniform(-spec.brightness_delta, spec.brightness_delta)
    contrast = rng.uniform(*spec.contrast_range)

    if np.allclose(matrix, np.eye(2)) and np.allclose(offset, 0.0):
        image, mask = sample.image, sample.mask
    else:
        image = np.stack(
            [ndimage.affine_transform(ch, matrix, offset, order=1, mode="constant", cval=0.0) for ch in sample.image]
        )
        mask = np.stack(
            [ndimage.affine_transform(ch, matrix, offset, order=0, mode="constant", cval=0.0) for ch in sample.mask]
        )

    if brightness != 0.0 or contrast != 1.0:
        mean = image.mean()
        image = np.clip((image - mean) * contrast + mean + brightness, 0.0, 1.0)
    return Sample(image.astype(np.float32), mask.astype(np.float32), sample.image_id)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class SampleSource:
    """Index-backed sample provider with an in-memory cache of resized samples."""

    def __init__(self, index: DatasetIndex, size: tuple[int, int] = DEFAULT_SIZE, invert: bool = True, cache: bool = True):
        index.validate()
        self.index = index
        self.size = tuple(size)
        self.invert = invert
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        sample = load_sample(self.index.entries[i], self.size, self.invert)
        if self._cache is not None:
            self._cache[i] = sample
        return sample

    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]


def batch_order(n: int, shuffle_seed) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(shuffle_seed).permutation(n)


def batches(
    source: DatasetIndex | SampleSource,
    batch_size: int,
    shuffle_seed=None,
    augment_spec: AugmentSpec | None = None,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> Iterator[tuple[Tensor, Tensor, list[str]]]:
    """Yield ``(images[B,3,H,W], masks[B,5,H,W], ids)``; the last batch may be short.

    ``shuffle_seed=None`` keeps index order. Augmentation draws one seed per
    sample from ``(shuffle_seed, position)`` so it is reproducible.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(source, DatasetIndex):
        source = SampleSource(source, size)
    if len(source) == 0:
        raise DataError("cannot batch an empty dataset")
    order = batch_order(len(source), shuffle_seed)
    base = 0 if shuffle_seed is None else int(shuffle_seed)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        items = []
        for pos, i in zip(range(start, start + len(chunk)), chunk):
            s = source[int(i)]
            if augment_spec is not None and augment_spec.enabled:
                s = augment(s, augment_spec, np.random.SeedSequence([base, pos]))
            items.append(s)
        images = np.stack([s.image for s in items])
        masks = np.stack([s.mask for s in items])
        yield Tensor(images), Tensor(masks), [s.image_id for s in items]


def split_counts(index: DatasetIndex) -> dict[LesionType, int]:
    """Number of images per lesion type that have a mask file."""
    return {t: sum(e.has_lesion(t) for e in index.entries) for t in LESION_ORDER}


def stack_lesion(samples: Sequence[Sample], lesion: LesionType | str) -> np.ndarray:
    ch = LesionType.parse(lesion).channel
    return np.stack([s.mask[ch] for s in samples])
