import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from lesionseg.data import DataError, DatasetIndex, IndexEntry, load_mask_channel
from lesionseg.lesions import LESION_ORDER, LesionType
from lesionseg.synth import (
    DEFAULT_STYLES,
    LesionStyle,
    SynthSpec,
    _image_rng,
    generate,
    imbalance_stats,
    lesion_free_count,
    render,
)


def small(**kw):
    base = dict(n_train=12, n_val=4, image_size=32, seed=3)
    base.update(kw)
    return SynthSpec(**base)


def file_hashes(root):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_all_lesion_free_writes_no_masks(tmp_path):
    generate(small(lesion_free_fraction=1.0), tmp_path)
    assert not any(tmp_path.glob("*/masks/*/*.png"))
    stats = imbalance_stats(DatasetIndex.load(tmp_path, "train"))
    assert all(s.image_fraction == 0 and s.pixel_fraction == 0 and s.pos_weight == 0 for s in stats.values())


def test_same_seed_byte_identical(tmp_path):
    generate(small(), tmp_path / "a")
    generate(small(), tmp_path / "b")
    a, b = file_hashes(tmp_path / "a"), file_hashes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 20
    assert {k: v for k, v in a.items() if not k.endswith("manifest.csv")} == {
        k: v for k, v in b.items() if not k.endswith("manifest.csv")
    }
    generate(small(seed=4), tmp_path / "c")
    assert file_hashes(tmp_path / "c") != a


def test_manifests_use_relative_paths_and_match(tmp_path):
    generate(small(), tmp_path / "a")
    generate(small(), tmp_path / "b")
    assert (tmp_path / "a/train/manifest.csv").read_bytes() == (tmp_path / "b/train/manifest.csv").read_bytes()


def test_floor_lesion_free_count(tmp_path):
    assert lesion_free_count(100, 0.71) == 71
    assert lesion_free_count(50, 0.71) == 35
    assert lesion_free_count(7, 0.5) == 3
    index = generate(SynthSpec(n_train=100, n_val=0, image_size=16, seed=0), tmp_path)["train"]
    free = sum(not any(e.has_lesion(t) for t in LESION_ORDER) for e in index.entries)
    assert free == 71


def test_measured_fraction_within_one_image(tmp_path):
    index = generate(small(n_train=30), tmp_path)["train"]
    free = sum(not any(e.has_lesion(t) for t in LESION_ORDER) for e in index.entries)
    assert abs(free / 30 - 0.71) <= 1 / 30


def test_blob_pixel_fraction(tmp_path):
    img = tmp_path / "images" / "x.png"
    img.parent.mkdir()
    Image.fromarray(np.zeros((320, 320, 3), np.uint8)).save(img)
    m = np.full((320, 320), 255, np.uint8)
    m[50:60, 70:80] = 0
    mask = tmp_path / "drusen.png"
    Image.fromarray(m, mode="L").save(mask)
    paths = {t: (mask if t is LesionType.DRUSEN else None) for t in LESION_ORDER}
    stats = imbalance_stats(DatasetIndex("train", [IndexEntry("x", img, paths)], tmp_path))
    d = stats[LesionType.DRUSEN]
    assert d.pixel_fraction == 100 / 102400
    assert (d.num_pos, d.num_neg, d.image_fraction) == (100, 102300, 1.0)
    assert d.pos_weight == 1023.0
    assert stats[LesionType.SCAR].pixel_fraction == 0


def test_masks_round_trip_through_loader(tmp_path):
    spec = small()
    index = generate(spec, tmp_path)["train"]
    free = set()
    for i, e in enumerate(index.entries):
        _, masks = render(spec, _image_rng(spec.seed, "train", i), any(e.has_lesion(t) for t in LESION_ORDER))
        for t in LESION_ORDER:
            loaded = load_mask_channel(e.mask_path(t), (32, 32)) if e.has_lesion(t) else None
            if t in masks:
                assert np.array_equal(loaded[0].astype(bool), masks[t])
            else:
                assert loaded is None
        if not masks:
            free.add(i)
    assert len(free) == lesion_free_count(12, 0.71)


def test_lesions_shift_colour():
    spec = SynthSpec(image_size=64, noise=0.0, lesion_free_fraction=0.0)
    for i in range(5):
        img, masks = render(spec, _image_rng(0, "train", i), True)
        clean, _ = render(SynthSpec(image_size=64, noise=0.0, contrast=1e-9), _image_rng(0, "train", i), True)
        for t, m in masks.items():
            shift = np.abs(img[m] - clean[m]).max(axis=1)
            # clipping at 0/1 may eat part of the shift on a few pixels
            assert np.median(shift) >= 0.08, t


def test_stats_file_and_default_weight_range(tmp_path):
    # the default train split; smaller samples scatter too much to pin a range
    generate(SynthSpec(n_val=0), tmp_path)
    stats = json.loads((tmp_path / "stats.json").read_text())
    weights = [v["pos_weight"] for v in stats["splits"]["train"].values()]
    assert all(100 <= w <= 600 for w in weights), weights
    assert SynthSpec.from_dict(stats["spec"]) == SynthSpec(n_val=0)


def test_unwritable_out_dir_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError, match="file"):
        generate(small(), blocker / "sub")


@pytest.mark.parametrize(
    "kw",
    [dict(lesion_free_fraction=1.5), dict(n_train=-1), dict(image_size=4), dict(noise=-0.1), dict(mimics=-1), dict(styles={})],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


@pytest.mark.parametrize("kw", [dict(presence=1.2), dict(radius=(0.0, 0.1)), dict(count=(3, 2))])
def test_style_validation(kw):
    base = dict(presence=0.5, count=(1, 2), radius=(0.05, 0.08), color=(0.1, 0.1, 0.1))
    base.update(kw)
    with pytest.raises(ValueError):
        LesionStyle(**base)


def test_spec_round_trip_with_style_override():
    d = {"styles": {"scar": {"presence": 0.9}}, "noise": 0.05}
    spec = SynthSpec.from_dict(d)
    assert spec.styles[LesionType.SCAR].presence == 0.9
    assert spec.styles[LesionType.DRUSEN] == DEFAULT_STYLES[LesionType.DRUSEN]
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_mimics_leave_masks_unchanged():
    plain = SynthSpec(image_size=48)
    mimic = SynthSpec(image_size=48, mimics=0.0, illumination=0.0)
    a = render(plain, _image_rng(0, "train", 5), True)
    b = render(mimic, _image_rng(0, "train", 5), True)
    assert np.array_equal(a[0], b[0])
