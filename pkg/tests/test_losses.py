import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg.losses import (
    LossSpec,
    bce_loss,
    compute_focal_alphas,
    compute_pos_weights,
    dice_loss,
    focal_loss,
    loss_spec_for_lesion_defaults,
    tversky_loss,
    weighted_bce_loss,
)
from lesionseg.numerics import Tensor
from lesionseg.numerics.gradcheck import check_gradients

seeds = st.integers(0, 2**31 - 1)


def instance(seed, shape=(2, 1, 8, 8), dtype=np.float64):
    r = np.random.default_rng(seed)
    z = r.normal(0, 2, size=shape).astype(dtype)
    t = (r.random(shape) < 0.3).astype(dtype)
    return z, t


def scalar(loss):
    return float(loss.data)


LOSSES = {
    "weighted_bce": lambda z, t: weighted_bce_loss(z, t, 7.5),
    "focal": lambda z, t: focal_loss(z, t, 0.3, 2.0),
    "dice": lambda z, t: dice_loss(z, t),
    "tversky": lambda z, t: tversky_loss(z, t, 0.3, 0.7),
}


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def test_pos_weight_exact_ratio():
    m = np.zeros((1, 5, 320, 320))
    m[0, 0].flat[:1024] = 1
    w = compute_pos_weights(m)
    assert w[0] == 99.0
    assert w[1:] == [0.0] * 4


def test_pos_weight_all_ones_channel():
    m = np.zeros((2, 5, 4, 4))
    m[:, 2] = 1
    assert compute_pos_weights(m)[2] == 0.0


def test_pos_weight_counts_whole_batch():
    m = np.zeros((2, 5, 4, 4))
    m[0, 0, 0, 0] = 1
    m[1, 0, 0, :3] = 1
    assert compute_pos_weights(m)[0] == 28 / 4


def test_focal_alphas_examples():
    assert compute_focal_alphas([3.0] * 5) == pytest.approx([0.2] * 5, abs=1e-12)
    assert compute_focal_alphas([1, 2, 3, 4, 0]) == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.0], abs=1e-12)


def test_focal_alphas_zero_input():
    with pytest.raises(ValueError):
        compute_focal_alphas([0, 0, 0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 1e4, allow_nan=False), min_size=5, max_size=5).filter(lambda w: sum(w) > 1e-6),
    st.floats(1e-3, 1e3),
)
def test_focal_alphas_normalised_and_scale_invariant(w, c):
    a = compute_focal_alphas(w)
    assert abs(sum(a) - 1.0) <= 1e-9
    b = compute_focal_alphas([c * x for x in w])
    assert max(abs(x - y) for x, y in zip(a, b)) <= 1e-9


# ---------------------------------------------------------------------------
# analytic values
# ---------------------------------------------------------------------------


def test_bce_analytic():
    z, t = np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1))
    assert scalar(weighted_bce_loss(Tensor(z), t, 1.0)) == pytest.approx(math.log(2), abs=1e-6)
    assert scalar(weighted_bce_loss(Tensor(z), t, 2.0)) == pytest.approx(2 * math.log(2), abs=1e-6)


def test_bce_stable_at_extreme_logits():
    z = Tensor(np.array([[[[1e4, -1e4]]]]))
    t = np.array([[[[0.0, 1.0]]]])
    v = scalar(weighted_bce_loss(z, t, 3.0))
    assert np.isfinite(v) and v == pytest.approx((1e4 + 3e4) / 2, rel=1e-6)


def test_focal_analytic():
    z, t = np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1))
    assert scalar(focal_loss(Tensor(z), t, 1.0, 2.0)) == pytest.approx(0.25 * math.log(2), abs=1e-6)


def test_dice_limits():
    t = np.zeros((1, 1, 4, 4))
    t[0, 0, :2] = 1
    assert scalar(dice_loss(Tensor(np.where(t > 0, 30.0, -30.0)), t)) < 0.01
    assert scalar(dice_loss(Tensor(np.full((1, 1, 4, 4), -30.0)), np.zeros((1, 1, 4, 4)))) == pytest.approx(0, abs=1e-9)


def test_tversky_perfect():
    t = np.zeros((1, 1, 4, 4))
    t[0, 0, 1:3, 1:3] = 1
    assert scalar(tversky_loss(Tensor(np.where(t > 0, 30.0, -30.0)), t, 0.3, 0.7)) < 0.01


def test_target_shape_checked():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))


# ---------------------------------------------------------------------------
# identities and properties
# ---------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_tversky_half_equals_dice(seed):
    z, t = instance(seed)
    assert abs(scalar(tversky_loss(Tensor(z), t, 0.5, 0.5)) - scalar(dice_loss(Tensor(z), t))) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_focal_gamma_zero_is_half_bce(seed):
    z, t = instance(seed)
    assert abs(scalar(focal_loss(Tensor(z), t, 0.5, 0.0)) - 0.5 * scalar(bce_loss(Tensor(z), t))) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seeds, st.sampled_from(sorted(LOSSES)))
def test_losses_non_negative_and_monotone_toward_target(seed, kind):
    z0, t = instance(seed, dtype=np.float32)
    z0 = np.clip(z0, -3, 3)
    z_star = np.where(t > 0, 20.0, -20.0)
    values = [scalar(LOSSES[kind](Tensor((1 - s) * z0 + s * z_star), t)) for s in np.linspace(0, 1, 10)]
    assert min(values) >= -1e-7
    assert all(b <= a + 1e-6 for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# gradients against finite differences
# ---------------------------------------------------------------------------


def fd(fn, seed):
    z, t = instance(seed)
    return check_gradients(lambda a: fn(a, t), [Tensor(z)])


@pytest.mark.parametrize("seed", range(5))
def test_bce_gradient(seed):
    assert fd(lambda a, t: weighted_bce_loss(a, t, 12.0), seed) <= 1e-3


@pytest.mark.parametrize("gamma", [1.0, 2.0, 3.0])
@pytest.mark.parametrize("seed", range(3))
def test_focal_gradient(gamma, seed):
    assert fd(lambda a, t: focal_loss(a, t, 0.25, gamma), seed) <= 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_dice_gradient(seed):
    assert fd(dice_loss, seed) <= 1e-3


@pytest.mark.parametrize("alpha", [0.1, 0.2, 0.3, 0.4])
@pytest.mark.parametrize("seed", range(3))
def test_tversky_gradient(alpha, seed):
    assert fd(lambda a, t: tversky_loss(a, t, alpha, 1.0 - alpha), seed) <= 1e-3


# ---------------------------------------------------------------------------
# LossSpec
# ---------------------------------------------------------------------------


def test_spec_dispatch_uses_lesion_parameters():
    z, t = instance(1)
    spec = LossSpec(kind="weighted_bce", pos_weight=[1, 2, 3, 4, 5])
    assert scalar(spec(Tensor(z), t, "other")) == pytest.approx(scalar(weighted_bce_loss(Tensor(z), t, 4.0)))
    spec = LossSpec(kind="focal", alpha=[0.1, 0.2, 0.3, 0.4, 0.5], gamma=1.0)
    assert scalar(spec(Tensor(z), t, "scar")) == pytest.approx(scalar(focal_loss(Tensor(z), t, 0.5, 1.0)))


def test_spec_round_trip():
    spec = LossSpec(kind="tversky", tversky_alpha=0.2, tversky_beta=0.8, weights="batch")
    assert LossSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="hinge"),
        dict(pos_weight=[-1, 1, 1, 1, 1]),
        dict(alpha=[1.5, 0, 0, 0, 0]),
        dict(gamma=-1),
        dict(tversky_alpha=0.3, tversky_beta=0.3),
        dict(smooth=0),
        dict(weights="sometimes"),
        dict(pos_weight=[1, 2]),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        LossSpec(**kwargs)


def test_default_final_weights():
    assert LossSpec().pos_weight == [135.0, 175.0, 386.0, 170.0, 550.0]


def test_lesion_defaults():
    s = loss_spec_for_lesion_defaults("tversky", "scar")
    assert (s.tversky_alpha, s.tversky_beta) == (0.2, 0.8)
    assert loss_spec_for_lesion_defaults("focal", "exudate").gamma == 3.0
