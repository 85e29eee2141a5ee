import math

import numpy as np
import pytest

from plex import tensor as T
from plex.encoders import (
    EncoderConfig,
    ImageEncoder,
    ObservationEncoders,
    PlaceholderBank,
    crop_batch,
    random_crop,
    spatial_softmax,
)
from plex.errors import ContractError, ShapeError
from plex.tensor import Tape, Tensor, backward, grad_check

from oracles import spatial_softmax_cells


def make_encoders(seed=0, dtype=np.float32, **overrides):
    cfg = EncoderConfig(**overrides)
    return ObservationEncoders(cfg, hidden_dim=16, rng=np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# spatial softmax
# ---------------------------------------------------------------------------


def test_spatial_softmax_uniform_map_is_centered():
    out = spatial_softmax(Tensor(np.zeros((3, 5, 5), dtype=np.float64)))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_spatial_softmax_spike_top_left():
    f = np.zeros((1, 7, 7))
    f[0, 0, 0] = 50.0
    out = spatial_softmax(Tensor(f, dtype=np.float64)).data
    assert out[0] == pytest.approx(-1.0, abs=1e-6)  # x
    assert out[1] == pytest.approx(-1.0, abs=1e-6)  # y


def test_spatial_softmax_two_by_two_hand_oracle():
    f = np.array([[[0.0, math.log(3.0)], [0.0, 0.0]]])
    out = spatial_softmax(Tensor(f, dtype=np.float64)).data
    ex, ey = spatial_softmax_cells(f)
    # weights are [1/6, 1/2, 1/6, 1/6]; E[x] = 1/3, E[y] = -1/3
    assert out[0] == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert out[1] == pytest.approx(-1.0 / 3.0, abs=1e-12)
    assert out[0] == pytest.approx(ex[0], abs=1e-12)
    assert out[1] == pytest.approx(ey[0], abs=1e-12)


def test_spatial_softmax_matches_cell_oracle_random():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4, 3, 5))
    out = spatial_softmax(Tensor(f, dtype=np.float64)).data
    ex, ey = spatial_softmax_cells(f)
    assert np.allclose(out[:4], ex, atol=1e-10)
    assert np.allclose(out[4:], ey, atol=1e-10)


# ---------------------------------------------------------------------------
# random crop
# ---------------------------------------------------------------------------


def test_crop_identity_when_full_extent():
    img = np.random.default_rng(1).random((6, 6, 3))
    assert np.array_equal(random_crop(img, 6), img)


def test_crop_same_seed_same_offsets():
    img = np.random.default_rng(2).random((8, 8, 3))
    a = random_crop(img, 5, np.random.default_rng(7), train=True)
    b = random_crop(img, 5, np.random.default_rng(7), train=True)
    assert np.array_equal(a, b)


def test_crop_contents_come_from_input():
    img = np.arange(6 * 6 * 1, dtype=np.float64).reshape(6, 6, 1)
    rng = np.random.default_rng(3)
    for _ in range(20):
        out = random_crop(img, 4, rng, train=True)
        found = False
        for oy in range(3):
            for ox in range(3):
                if np.array_equal(img[oy : oy + 4, ox : ox + 4], out):
                    found = True
        assert found
    with pytest.raises(ContractError):
        random_crop(img, 7)


def test_center_crop_is_deterministic():
    img = np.random.default_rng(4).random((10, 10, 3))
    assert np.array_equal(random_crop(img, 6), random_crop(img, 6))


# ---------------------------------------------------------------------------
# low-dim encoders
# ---------------------------------------------------------------------------


def test_lowdim_zero_input_gives_bias():
    enc = make_encoders()
    out = enc.encode_lowdim(np.zeros((1, 2)), "p").data[0]
    assert np.array_equal(out, enc.proprio.b.data)


def test_lowdim_linearity():
    enc = make_encoders(dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2))
    y = rng.standard_normal((1, 2))
    phi = lambda v: enc.encode_lowdim(v, "a").data
    zero = phi(np.zeros((1, 2)))
    lhs = phi(x + y) - zero
    rhs = (phi(x) - zero) + (phi(y) - zero)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_lowdim_dimension_mismatch():
    enc = make_encoders()
    with pytest.raises(ShapeError):
        enc.encode_lowdim(np.zeros((1, 3)), "p")
    with pytest.raises(ContractError):
        enc.encode_lowdim(np.zeros((1, 2)), "I")


def test_lowdim_grad_check():
    enc = make_encoders(dtype=np.float64)
    x = np.random.default_rng(6).standard_normal((3, 2))
    probe = Tensor(np.random.default_rng(7).standard_normal((3, 16)))

    def f(params):
        return T.sum_(T.mul(enc.encode_lowdim(x, "p"), probe))

    assert grad_check(f, [enc.proprio.W, enc.proprio.b]) <= 1e-6


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------


def test_encode_image_output_dim_and_determinism():
    enc = make_encoders()
    imgs = np.random.default_rng(8).random((2, 24, 24, 3)).astype(np.float32)
    a = enc.encode_images(imgs).data
    b = enc.encode_images(imgs).data
    assert a.shape == (2, 16)
    assert np.array_equal(a, b)


def test_encode_image_wrong_extent():
    enc = make_encoders()
    with pytest.raises(ShapeError):
        enc.encode_images(np.zeros((1, 20, 20, 3)))


def test_encode_image_train_mode_uses_rng_crop():
    enc = make_encoders()
    imgs = np.random.default_rng(9).random((1, 24, 24, 3)).astype(np.float32)
    a = enc.encode_images(imgs, train=True, rng=np.random.default_rng(1)).data
    b = enc.encode_images(imgs, train=True, rng=np.random.default_rng(1)).data
    c = enc.encode_images(imgs, train=True, rng=np.random.default_rng(2)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)  # different crop offsets move the embedding


def test_encode_image_grad_check():
    # small image config keeps the finite-difference sweep quick
    enc = make_encoders(dtype=np.float64, image_hw=12, crop_ratio=1.0, conv_channels=(4, 8), conv_strides=(2, 2), mlp_hidden=(8,))
    imgs = np.random.default_rng(10).random((2, 12, 12, 3))
    probe = Tensor(np.random.default_rng(11).standard_normal((2, 16)))

    def f(params):
        return T.sum_(T.mul(enc.encode_images(imgs), probe))

    err = grad_check(f, enc.image.parameters(), sample=8, rng=np.random.default_rng(0))
    assert err <= 1e-4


def test_multi_camera_concat_projection():
    cfg = EncoderConfig(n_cameras=2)
    enc = ImageEncoder(cfg, 16, np.random.default_rng(12))
    imgs = [np.random.default_rng(13).random((1, 24, 24, 3)).astype(np.float32) for _ in range(2)]
    assert enc(imgs).data.shape == (1, 16)
    with pytest.raises(ShapeError):
        enc(imgs[:1])


# ---------------------------------------------------------------------------
# task encoder and placeholders
# ---------------------------------------------------------------------------


def test_encode_task_identical_and_distinct_goals():
    enc = make_encoders()
    rng = np.random.default_rng(14)
    g1 = rng.random((1, 24, 24, 3)).astype(np.float32)
    g2 = rng.random((1, 24, 24, 3)).astype(np.float32)
    a = enc.encode_task(g1).data
    assert a.shape == (1, 16)
    assert np.array_equal(a, enc.encode_task(g1).data)
    assert np.abs(a - enc.encode_task(g2).data).max() > 0


def test_placeholder_identity_and_independence():
    bank = PlaceholderBank(8, np.random.default_rng(15))
    assert bank.placeholder_for("R") is bank.placeholder_for("R")
    with pytest.raises(ContractError):
        bank.placeholder_for("x")
    # two modalities have disjoint gradient footprints
    with Tape() as tape:
        backward(T.sum_(bank.placeholder_for("g")), tape)
    assert bank.g.grad is not None and np.all(bank.g.grad == 1.0)
    assert bank.a.grad is None


def test_placeholder_receives_grad_when_used():
    bank = PlaceholderBank(8, np.random.default_rng(16))
    with Tape() as tape:
        loss = T.sum_(T.mul(bank.placeholder_for("R"), bank.placeholder_for("R")))
        backward(loss, tape)
    assert np.abs(bank.R.grad).max() > 0
