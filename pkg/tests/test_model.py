import json

import numpy as np
import pytest

from lesionseg.losses import weighted_bce_loss
from lesionseg.model import (
    PRESETS,
    EncoderPreset,
    SegModel,
    build,
    load_weights,
    manifest_path,
    model_from_manifest,
    save_weights,
)
from lesionseg.numerics import NonFiniteError, ShapeError, Tensor, WeightFormatError, maxpool2, no_grad
from lesionseg.numerics.gradcheck import check_sampled_parameters


def images(shape, seed=0):
    return Tensor(np.random.default_rng(seed).random(shape).astype(np.float32))


def as_float64(model):
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    return model


@pytest.mark.parametrize("shape", [(2, 3, 160, 160), (1, 3, 64, 96)])
def test_output_shape(shape):
    out = build("small")(images(shape), mode="eval")
    assert out.shape == (shape[0], 1) + shape[2:]
    assert np.isfinite(out.data).all()


def test_full_size_output_shape():
    with no_grad():
        out = build("small")(images((1, 3, 320, 320)), mode="eval")
    assert out.shape == (1, 1, 320, 320)


def test_bottleneck_is_one_thirty_second():
    x = images((1, 3, 320, 320))
    for _ in range(5):
        x = maxpool2(x)
    assert x.shape[2:] == (10, 10)


def test_size_not_divisible_by_32():
    with pytest.raises(ShapeError, match="32"):
        build("small")(images((1, 3, 48, 64)))


def test_same_seed_same_parameters():
    a, b = build("small", init_seed=3).state_dict(), build("small", init_seed=3).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build("small", init_seed=4).state_dict()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_b2_larger_than_b0():
    assert SegModel("b2_like").num_parameters() > SegModel("b0_like").num_parameters()


def test_preset_widths():
    assert PRESETS["small"].stage_channels == (8, 16, 32, 64, 128)
    assert PRESETS["b0_like"].stage_channels == (16, 24, 40, 112, 320)
    assert PRESETS["b2_like"].stage_channels == (16, 24, 48, 120, 352)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(stage_channels=(8, 16, 32, 64), blocks_per_stage=(1, 1, 1, 1)),
        dict(stage_channels=(8, 16, 8, 64, 128), blocks_per_stage=(1,) * 5),
        dict(stage_channels=(8, 16, 32, 64, 128), blocks_per_stage=(1, 0, 1, 1, 1)),
    ],
)
def test_preset_validation(kwargs):
    with pytest.raises(ValueError):
        EncoderPreset("bad", **kwargs)


def test_unknown_preset():
    with pytest.raises(ValueError):
        SegModel("b7_like")


def test_zero_dropout_is_inert_in_training():
    # at rate 0 the train-mode forward draws no randomness and repeats exactly
    m = build("small", dropout_rate=0.0)
    x = images((2, 3, 32, 32))
    state = m._dropout_rng.bit_generator.state
    a, b = m(x, mode="train").data, m(x, mode="train").data
    assert np.array_equal(a, b)
    assert m._dropout_rng.bit_generator.state == state


def test_zero_dropout_train_and_eval_agree(monkeypatch):
    import lesionseg.model as model_module

    real = model_module.batchnorm2d

    def copy_batch_stats(x, gamma, beta, running_mean, running_var, training):
        out = real(x, gamma, beta, running_mean, running_var, training)
        if training:
            d = x.data.astype(np.float64)
            running_mean[...] = d.mean(axis=(0, 2, 3))
            running_var[...] = d.var(axis=(0, 2, 3))
        return out

    monkeypatch.setattr(model_module, "batchnorm2d", copy_batch_stats)
    m = build("small", dropout_rate=0.0)
    x = images((2, 3, 64, 64))
    train_out = m(x, mode="train").data
    monkeypatch.setattr(model_module, "batchnorm2d", real)
    np.testing.assert_allclose(m(x, mode="eval").data, train_out, atol=1e-4)


def test_dropout_only_active_in_training():
    m = build("small", dropout_rate=0.5)
    x = images((1, 3, 32, 32))
    assert np.array_equal(m(x, mode="eval").data, m(x, mode="eval").data)
    assert not np.array_equal(m(x, mode="train").data, m(x, mode="train").data)


def test_zeroed_skip_changes_output():
    m = build("small")
    x = images((1, 3, 64, 64))
    base = m(x, mode="eval").data
    for j in range(4):
        assert not np.allclose(m(x, mode="eval", zero_skip=j).data, base)


def test_eval_is_batch_independent():
    m = build("small", init_seed=1)
    # non-trivial running statistics
    for s in range(3):
        m(images((4, 3, 64, 64), s), mode="train")
    x = images((3, 3, 64, 64), 9)
    batch = m(x, mode="eval").data
    for i in range(3):
        alone = m(Tensor(x.data[i : i + 1]), mode="eval").data
        np.testing.assert_allclose(alone[0], batch[i], atol=1e-5)
    assert np.array_equal(batch, m(x, mode="eval").data)


def test_non_finite_input_names_layer():
    x = np.zeros((1, 3, 32, 32), np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="encoder stage 0"):
        build("small")(Tensor(x), mode="eval")


def test_mode_validated():
    with pytest.raises(ValueError):
        build("small")(images((1, 3, 32, 32)), mode="inference")


# ---------------------------------------------------------------------------
# end-to-end gradients
# ---------------------------------------------------------------------------


def _e2e(seed, mode):
    m = as_float64(SegModel("small", init_seed=seed))
    r = np.random.default_rng(seed)
    x = Tensor(r.random((2, 3, 32, 32)))
    t = (r.random((2, 1, 32, 32)) < 0.2).astype(np.float64)
    return check_sampled_parameters(
        lambda: weighted_bce_loss(m(x, mode=mode), t, 5.0), m.parameters(), 20, rng=np.random.default_rng(seed)
    )


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients_eval(seed):
    worst, _ = _e2e(seed, "eval")
    assert worst <= 2e-3


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients_train(seed):
    worst, _ = _e2e(seed, "train")
    assert worst <= 2e-3


def test_end_to_end_gradients_torch_backend():
    pytest.importorskip("torch")
    from lesionseg.numerics import set_conv_backend

    prev = set_conv_backend("torch")
    try:
        worst, _ = _e2e(0, "eval")
    finally:
        set_conv_backend(prev)
    assert worst <= 2e-3


# ---------------------------------------------------------------------------
# weights on disk
# ---------------------------------------------------------------------------


def test_save_load_bit_identical(tmp_path):
    m = build("small", init_seed=5, lesion="scar")
    m(images((2, 3, 32, 32)), mode="train")
    path = tmp_path / "w.lseg"
    save_weights(m, path, {"input_size": [32, 32]})
    fresh = load_weights(build("small", init_seed=99), path)
    x = images((1, 3, 64, 64), 2)
    assert np.array_equal(m(x, mode="eval").data, fresh(x, mode="eval").data)
    info = json.loads(manifest_path(path).read_text())
    assert info["lesion"] == "scar" and info["input_size"] == [32, 32]
    rebuilt, _ = model_from_manifest(path)
    assert np.array_equal(m(x, mode="eval").data, rebuilt(x, mode="eval").data)


def test_truncated_file_leaves_model_unchanged(tmp_path):
    path = tmp_path / "w.lseg"
    save_weights(build("small", init_seed=1), path)
    path.write_bytes(path.read_bytes()[:-10])
    m = build("small", init_seed=2)
    before = m.state_dict()
    with pytest.raises(WeightFormatError):
        load_weights(m, path)
    after = m.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_preset_mismatch_names_parameter(tmp_path):
    path = tmp_path / "b0.lseg"
    save_weights(SegModel("b0_like"), path)
    b2 = SegModel("b2_like")
    before = b2.state_dict()
    with pytest.raises(WeightFormatError, match=r"encoder\.0\.1\.conv\.weight|encoder\.2\.0\.conv\.weight"):
        load_weights(b2, path)
    assert all(np.array_equal(before[k], v) for k, v in b2.state_dict().items())
