import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featureness import datagen
from featureness.imgcore import (
    DegenerateHomographyError, Homography, PointAtInfinityError, apply_homography, as_image,
    read_image, rotation_angle_deg, sample_homography, to_gray, warp_image, write_image,
)


def test_identity_and_translation_points():
    assert np.allclose(apply_homography(Homography.identity(), (10, 10)), (10, 10))
    assert np.allclose(apply_homography(Homography.translation(5, 0), (10, 10)), (15, 10))


def test_homography_normalised_and_singular_rejected():
    h = Homography(np.diag([2.0, 2.0, 2.0]))
    assert h.m[2, 2] == 1.0
    with pytest.raises(DegenerateHomographyError):
        Homography(np.zeros((3, 3)))
    with pytest.raises(DegenerateHomographyError):
        Homography(np.array([[1, 2, 0], [2, 4, 0], [0, 0, 1.0]]))


def test_point_at_infinity():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 1.0]]))
    with pytest.raises(PointAtInfinityError):
        apply_homography(h, (-1.0, 3.0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 150), st.floats(-50, 150))
def test_round_trip_through_inverse(seed, x, y):
    h = sample_homography(np.random.default_rng(seed))
    p = np.array([x, y])
    back = apply_homography(h.inverse(), apply_homography(h, p))
    assert np.allclose(back, p, atol=1e-9, rtol=0)


def test_warp_identity():
    img = datagen.gen_texture_image(np.random.default_rng(0), (40, 50))
    out, valid = warp_image(img, Homography.identity())
    assert np.array_equal(out, img)
    assert valid.all()


def test_warp_integer_translation():
    img = datagen.gen_texture_image(np.random.default_rng(1), (32, 40))
    out, valid = warp_image(img, Homography.translation(3, 0))
    assert np.array_equal(out[:, 3:], img[:, :-3])
    assert not valid[:, :3].any() and valid[:, 3:].all()
    assert (out[:, :3] == 0).all()


def test_warp_round_trip_error_small():
    rng = np.random.default_rng(2)
    ys, xs = np.mgrid[0:96, 0:96]
    grid = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
    errs = []
    for _ in range(10):
        img = datagen.gen_texture_image(rng)
        h = sample_homography(rng)
        w1, v1 = warp_image(img, h)
        w2, v2 = warp_image(w1, h.inverse())
        # doubly valid: the second warp read only pixels that the first warp filled
        fwd = apply_homography(h, grid)
        inner = ((fwd[:, 0] >= 1) & (fwd[:, 0] <= 94) & (fwd[:, 1] >= 1) & (fwd[:, 1] <= 94)).reshape(96, 96)
        m = v2 & inner
        errs.append(np.abs(w2 - img)[m].mean())
    assert np.mean(errs) <= 0.05


def test_validity_mask_matches_inverse_map():
    rng = np.random.default_rng(3)
    for _ in range(5):
        h = sample_homography(rng, size=(30, 36))
        img = rng.random((30, 36)).astype(np.float32)
        out, valid = warp_image(img, h)
        ys, xs = np.mgrid[0:30, 0:36]
        src = apply_homography(h.inverse(), np.stack([xs.ravel(), ys.ravel()], 1).astype(float))
        expect = ((src[:, 0] >= 0) & (src[:, 0] <= 35) & (src[:, 1] >= 0) & (src[:, 1] <= 29)).reshape(30, 36)
        assert np.array_equal(valid, expect)
        assert out.min() >= 0 and out.max() <= 1
        assert (out[~valid] == 0).all()


def test_sampler_zero_bounds_is_identity():
    h = sample_homography(np.random.default_rng(0), 0.0, (1.0, 1.0), 0.0, 0.0)
    assert np.allclose(h.m, np.eye(3), atol=1e-12)


def test_sampler_deterministic():
    a = sample_homography(np.random.default_rng(42))
    b = sample_homography(np.random.default_rng(42))
    assert np.array_equal(a.m, b.m)


def test_sampler_monte_carlo_bounds():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        h = sample_homography(rng)
        assert abs(np.linalg.det(h.m)) > 1e-12
        assert abs(rotation_angle_deg(h)) <= 15.0 + 1e-9


def test_sampler_clamps_bounds():
    h = sample_homography(np.random.default_rng(0), rotation_deg=90.0, scale=(0.1, 5.0))
    assert abs(rotation_angle_deg(h)) <= 15.0 + 1e-9


def test_to_gray_weights():
    px = np.array([[[1, 1, 1], [0, 0, 0], [1, 0, 0]]], dtype=float)
    g = to_gray(px)
    assert np.allclose(g[0], [1.0, 0.0, 0.299], atol=1e-6)


def test_as_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        as_image(np.full((4, 4), 1.5))
    with pytest.raises(ValueError):
        as_image(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_image_io_round_trip(tmp_path, suffix):
    img = np.random.default_rng(0).integers(0, 256, (13, 17)) / 255.0
    write_image(tmp_path / f"a{suffix}", img)
    back = read_image(tmp_path / f"a{suffix}")
    assert back.shape == (13, 17)
    assert np.allclose(back, img, atol=1e-6)


def test_rgb_png_read_as_gray(tmp_path):
    from PIL import Image
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb, "RGB").save(tmp_path / "r.png")
    assert np.allclose(read_image(tmp_path / "r.png"), 0.299, atol=1e-6)
