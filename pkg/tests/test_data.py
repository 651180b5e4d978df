import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lesionseg.data import (
    AugmentSpec,
    DataError,
    DatasetIndex,
    Sample,
    SampleSource,
    assemble_mask,
    augment,
    batch_order,
    batches,
    binarize_mask,
    load_image,
    load_mask_channel,
    load_sample,
    resize,
    split_counts,
)
from lesionseg.lesions import LESION_ORDER, LesionType


def write_mask(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, np.uint8), mode="L").save(path)
    return path


def write_image(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, np.uint8), mode="RGB").save(path)
    return path


def make_dataset(root, n=4, size=16, lesion_every=2):
    """``n`` images; every ``lesion_every``-th one gets a 4x4 drusen block."""
    rng = np.random.default_rng(0)
    for i in range(n):
        write_image(root / "train" / "images" / f"img{i}.png", rng.integers(0, 256, (size, size, 3)))
        if i % lesion_every == 0:
            m = np.full((size, size), 255, np.uint8)
            m[2:6, 3:7] = 0
            write_mask(root / "train" / "masks" / "drusen" / f"img{i}.png", m)
    return root


def sample_with_block(size=100, block=40):
    img = np.zeros((3, size, size), np.float32)
    mask = np.zeros((5, size, size), np.float32)
    lo = (size - block) // 2
    mask[0, lo : lo + block, lo : lo + block] = 1
    img[:, lo : lo + block, lo : lo + block] = 0.5
    return Sample(img, mask, "x")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def test_absent_mask_is_zero():
    ch = load_mask_channel(None, (7, 9))
    assert ch.shape == (1, 7, 9) and not ch.any()


def test_uniform_background_mask_is_zero(tmp_path):
    p = write_mask(tmp_path / "m.png", np.full((8, 8), 255))
    assert not load_mask_channel(p, None).any()


def test_block_count_exact(tmp_path):
    m = np.full((32, 32), 255)
    m[5:15, 10:20] = 0
    ch = load_mask_channel(write_mask(tmp_path / "m.png", m), None)
    assert int(ch.sum()) == 100
    assert ch[0, 5:15, 10:20].all()


def test_antialiased_values_are_foreground():
    np.testing.assert_array_equal(binarize_mask(np.array([0, 1, 128, 254, 255])), [1, 1, 1, 1, 0])


def test_invert_toggle():
    np.testing.assert_array_equal(binarize_mask(np.array([0, 255]), invert=False), [0, 1])


def test_non_grayscale_mask_rejected(tmp_path):
    p = write_image(tmp_path / "rgb.png", np.zeros((4, 4, 3)))
    with pytest.raises(DataError, match="rgb.png"):
        load_mask_channel(p, None)


def test_unreadable_mask_names_path(tmp_path):
    p = tmp_path / "broken.png"
    p.write_bytes(b"not a png")
    with pytest.raises(DataError, match="broken.png"):
        load_mask_channel(p, None)


def test_mask_resize_keeps_full_foreground(tmp_path):
    p = write_mask(tmp_path / "m.png", np.zeros((640, 640)))
    ch = load_mask_channel(p, (320, 320))
    assert ch.shape == (1, 320, 320) and ch.all()


def test_image_scaled_to_unit_range(tmp_path):
    p = write_image(tmp_path / "i.png", np.full((4, 5, 3), 255))
    img = load_image(p)
    assert img.shape == (3, 4, 5) and img.dtype == np.float32
    np.testing.assert_array_equal(img, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_assemble_then_extract_round_trip(seed):
    r = np.random.default_rng(seed)
    raw = {t: r.choice([0, 17, 255], size=(6, 5)) for t in LESION_ORDER if r.random() < 0.7}
    channels = {t: binarize_mask(v) for t, v in raw.items()}
    mask = assemble_mask(channels, (6, 5))
    for t in LESION_ORDER:
        expect = channels.get(t, np.zeros((6, 5)))
        np.testing.assert_array_equal(mask[t.channel], expect)


def test_channel_order():
    assert [t.value for t in LESION_ORDER] == ["drusen", "exudate", "haemorrhage", "other", "scar"]


# ---------------------------------------------------------------------------
# dataset index
# ---------------------------------------------------------------------------


def test_scan_and_sample(tmp_path):
    root = make_dataset(tmp_path, n=4)
    index = DatasetIndex.scan(root, "train")
    assert len(index) == 4
    assert split_counts(index)[LesionType.DRUSEN] == 2
    s = load_sample(index.entries[0], None)
    assert s.image.shape == (3, 16, 16) and s.mask.shape == (5, 16, 16)
    assert int(s.channel("drusen").sum()) == 16
    assert not s.mask[1:].any()


def test_manifest_round_trip(tmp_path):
    root = make_dataset(tmp_path, n=3)
    index = DatasetIndex.scan(root, "train")
    index.write_manifest(root / "train" / "manifest.csv")
    back = DatasetIndex.from_manifest(root, "train")
    assert [e.image_id for e in back.entries] == [e.image_id for e in index.entries]
    assert [e.has_lesion("drusen") for e in back.entries] == [True, False, True]


def test_missing_image_dir(tmp_path):
    with pytest.raises(DataError):
        DatasetIndex.scan(tmp_path, "val")


def test_missing_referenced_file(tmp_path):
    root = make_dataset(tmp_path, n=2)
    index = DatasetIndex.scan(root, "train")
    (root / "train" / "masks" / "drusen" / "img0.png").unlink()
    with pytest.raises(DataError, match="img0.png"):
        index.validate()


def test_empty_index_rejected():
    with pytest.raises(DataError):
        DatasetIndex("train", []).validate()


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def test_resize_identity():
    s = sample_with_block(20, 8)
    out = resize(s, (20, 20))
    np.testing.assert_array_equal(out.mask, s.mask)
    np.testing.assert_allclose(out.image, s.image, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 40), st.integers(4, 40), st.integers(0, 2**31 - 1))
def test_resize_mask_stays_binary(h, w, seed):
    r = np.random.default_rng(seed)
    s = Sample(r.random((3, 17, 23)).astype(np.float32), (r.random((5, 17, 23)) < 0.3).astype(np.float32), "r")
    out = resize(s, (h, w))
    assert out.mask.shape == (5, h, w) and out.image.shape == (3, h, w)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_resize_rejects_non_positive():
    with pytest.raises(ValueError):
        resize(sample_with_block(10, 4), (0, 5))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_disabled_augment_is_identity():
    s = sample_with_block()
    assert augment(s, AugmentSpec.disabled(), 3) is s


def test_geometric_identity():
    s = sample_with_block()
    spec = AugmentSpec(0.0, (1.0, 1.0), (1.0, 1.0), 0.1, (0.9, 1.1))
    out = augment(s, spec, 5)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_rotated_block_area_within_15_percent():
    s = sample_with_block(100, 40)
    spec = AugmentSpec(10.0, (1.0, 1.0), (1.0, 1.0), 0.0, (1.0, 1.0))
    for seed in range(100):
        n = augment(s, spec, seed).mask[0].sum()
        assert abs(n - 1600) <= 0.15 * 1600


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_reproducible_and_binary(seed):
    s = sample_with_block(48, 16)
    a, b = augment(s, AugmentSpec(), seed), augment(s, AugmentSpec(), seed)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert a.size == s.size
    assert set(np.unique(a.mask)) <= {0.0, 1.0}
    assert a.image.min() >= 0 and a.image.max() <= 1


def test_photometric_leaves_mask_alone():
    s = sample_with_block(32, 10)
    spec = AugmentSpec(0.0, (1.0, 1.0), (1.0, 1.0), 0.1, (0.9, 1.1))
    out = augment(s, spec, 11)
    np.testing.assert_array_equal(out.mask, s.mask)
    assert not np.array_equal(out.image, s.image)


def test_geometry_shared_across_channels():
    s = sample_with_block(64, 20)
    mask = np.array(s.mask)
    mask[3] = mask[0]
    s = Sample(s.image, mask, "x")
    out = augment(s, AugmentSpec(), 2)
    np.testing.assert_array_equal(out.mask[0], out.mask[3])
    # the image block moved with the mask
    assert out.image[0][out.mask[0] > 0].mean() > out.image[0][out.mask[0] == 0].mean()


def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(max_rotation_deg=-1)
    with pytest.raises(ValueError):
        AugmentSpec(scale_range=(1.2, 0.9))
    with pytest.raises(ValueError):
        AugmentSpec(crop_fraction_range=(0.9, 1.2))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def test_batch_sizes(tmp_path):
    root = make_dataset(tmp_path, n=100, size=8, lesion_every=3)
    sizes = [imgs.shape[0] for imgs, _, _ in batches(DatasetIndex.scan(root, "train"), 32, size=(8, 8))]
    assert sizes == [32, 32, 32, 4]


def test_batches_deterministic_and_binary(tmp_path):
    root = make_dataset(tmp_path, n=10, size=16)
    source = SampleSource(DatasetIndex.scan(root, "train"), (16, 16))
    run = lambda: [(i.data.copy(), m.data.copy(), ids) for i, m, ids in batches(source, 3, 7, AugmentSpec(), (16, 16))]
    a, b = run(), run()
    for (ia, ma, ida), (ib, mb, idb) in zip(a, b):
        assert ida == idb
        assert np.array_equal(ia, ib) and np.array_equal(ma, mb)
        assert set(np.unique(ma)) <= {0.0, 1.0}


def test_unshuffled_keeps_index_order(tmp_path):
    root = make_dataset(tmp_path, n=5, size=8)
    ids = [i for _, _, chunk in batches(DatasetIndex.scan(root, "train"), 2, size=(8, 8)) for i in chunk]
    assert ids == [f"img{i}" for i in range(5)]


def test_different_seeds_shuffle_differently():
    for s in range(10):
        assert not np.array_equal(batch_order(100, 2 * s), batch_order(100, 2 * s + 1))
        assert np.array_equal(batch_order(100, s), batch_order(100, s))


def test_empty_source_rejected(tmp_path):
    class Empty:
        def __len__(self):
            return 0

    with pytest.raises(DataError):
        next(batches(Empty(), 4))


def test_batch_size_validated(tmp_path):
    root = make_dataset(tmp_path, n=2, size=8)
    with pytest.raises(ValueError):
        next(batches(DatasetIndex.scan(root, "train"), 0, size=(8, 8)))


def test_samples_are_immutable():
    s = sample_with_block(8, 2)
    with pytest.raises(ValueError):
        s.mask[0, 0, 0] = 1
