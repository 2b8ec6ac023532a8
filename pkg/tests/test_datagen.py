import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featureness import datagen
from featureness.datagen import (
    KittiFormatError, PhotometricConfig, SequenceConfig, gen_pair, gen_texture_image,
    load_kitti, parse_pose_line, render_sequence, step_transform, write_kitti, zone_covering,
)
from featureness.imgcore import apply_homography


def small_seq(**kw):
    base = dict(n_frames=4, height=48, width=64, fx=60.0, fy=60.0, texture_size=128)
    base.update(kw)
    return SequenceConfig(**base)


def test_texture_deterministic_and_contrast():
    a = gen_texture_image(np.random.default_rng(5))
    b = gen_texture_image(np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert a.dtype == np.float32 and a.shape == (96, 96)
    assert a.min() < 0.1 and a.max() > 0.9


def test_texture_std_floor():
    rng = np.random.default_rng(11)
    stds = [gen_texture_image(rng).std() for _ in range(100)]
    assert min(stds) >= 0.1


def test_texture_small_size():
    img = gen_texture_image(np.random.default_rng(0), (32, 32))
    assert img.shape == (32, 32)
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_pair_zero_config_is_identity():
    img = gen_texture_image(np.random.default_rng(0))
    pair = gen_pair(np.random.default_rng(1), img, PhotometricConfig.zero())
    assert np.allclose(pair.h_ab.m, np.eye(3))
    assert np.array_equal(pair.img_b, img)
    assert pair.valid_b.all()


def test_pair_default_validity_fraction():
    rng = np.random.default_rng(3)
    img = gen_texture_image(rng)
    for _ in range(200):
        assert gen_pair(rng, img).valid_b.mean() >= 0.5


def test_pair_deterministic():
    img = gen_texture_image(np.random.default_rng(0))
    a = gen_pair(np.random.default_rng(9), img)
    b = gen_pair(np.random.default_rng(9), img)
    assert np.array_equal(a.img_b, b.img_b) and np.array_equal(a.h_ab.m, b.h_ab.m)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pair_homography_consistent_with_validity(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((40, 40)).astype(np.float32)
    pair = gen_pair(rng, img)
    ys, xs = np.mgrid[0:40, 0:40]
    src = apply_homography(pair.h_ab.inverse(), np.stack([xs.ravel(), ys.ravel()], 1).astype(float))
    inside = ((src >= 0) & (src <= 39)).all(1).reshape(40, 40)
    assert np.array_equal(inside, pair.valid_b)
    assert pair.img_b.min() >= 0 and pair.img_b.max() <= 1


def test_sequence_static_two_frames():
    seq = render_sequence(small_seq(n_frames=2, forward_speed=0.0), np.random.default_rng(0))
    assert np.array_equal(seq.frames[0], seq.frames[1])
    assert np.array_equal(seq.poses_gt[0], seq.poses_gt[1])
    assert np.array_equal(seq.poses_gt[0], np.eye(4))


def test_sequence_forward_step_norm():
    seq = render_sequence(small_seq(n_frames=100, height=24, width=32, fx=30.0, fy=30.0,
                                    texture_size=64), np.random.default_rng(0))
    for a, b in zip(seq.poses_gt, seq.poses_gt[1:]):
        assert np.linalg.norm((np.linalg.inv(a) @ b)[:3, 3]) == pytest.approx(0.1, abs=1e-12)


@pytest.mark.parametrize("yaw,lat", [(0.0, 0.0), (0.5, 0.0), (-0.3, 0.002)])
def test_sequence_exact_chaining(yaw, lat):
    cfg = small_seq(n_frames=6, yaw_rate_deg=yaw, lateral_speed=lat)
    seq = render_sequence(cfg, np.random.default_rng(0))
    step = step_transform(cfg)
    for a, b in zip(seq.poses_gt, seq.poses_gt[1:]):
        assert np.allclose(np.linalg.inv(a) @ b, step, atol=1e-12)


def test_sequence_deterministic():
    a = render_sequence(small_seq(), np.random.default_rng(4))
    b = render_sequence(small_seq(), np.random.default_rng(4))
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_zone_changes_between_frames():
    zone = zone_covering(0.2)
    cfg = SequenceConfig(n_frames=3, zones=[zone], texture_size=128)
    seq = render_sequence(cfg, np.random.default_rng(0))
    x0, y0, x1, y1 = zone
    assert (x1 - x0) * (y1 - y0) / (320 * 240) == pytest.approx(0.2, abs=0.01)
    for a, b in zip(seq.frames, seq.frames[1:]):
        assert np.abs(a[y0:y1, x0:x1] - b[y0:y1, x0:x1]).mean() > 0.2


def test_path_into_wall_raises():
    with pytest.raises(ValueError, match="wall"):
        render_sequence(small_seq(n_frames=50, lateral_speed=0.05), np.random.default_rng(0))


def test_sequence_needs_two_frames():
    with pytest.raises(ValueError):
        render_sequence(small_seq(n_frames=1), np.random.default_rng(0))


def test_pose_line_identity_and_errors():
    assert np.array_equal(parse_pose_line("1 0 0 0 0 1 0 0 0 0 1 0"), np.eye(4))
    with pytest.raises(KittiFormatError, match="line 7"):
        parse_pose_line("1 0 0 x 0 1 0 0 0 0 1 0", 7)
    with pytest.raises(KittiFormatError):
        parse_pose_line("1 0 0", 2)


def test_kitti_round_trip_and_rebase(tmp_path):
    seq = render_sequence(small_seq(n_frames=5), np.random.default_rng(0))
    write_kitti(seq, tmp_path)
    back = load_kitti(tmp_path)
    assert len(back.frames) == 5
    assert back.intrinsics == seq.intrinsics
    for a, b in zip(seq.poses_gt, back.poses_gt):
        assert np.allclose(a, b, atol=1e-12)
    part = load_kitti(tmp_path, (2, 5))
    assert len(part.frames) == 3
    assert np.allclose(part.poses_gt[0], np.eye(4))
    assert np.allclose(part.poses_gt[1], np.linalg.inv(seq.poses_gt[2]) @ seq.poses_gt[3], atol=1e-12)
    assert np.abs(part.frames[0] - seq.frames[2]).max() <= 0.5 / 255 + 1e-6


def test_kitti_errors(tmp_path):
    seq = render_sequence(small_seq(n_frames=3), np.random.default_rng(0))
    write_kitti(seq, tmp_path)
    with pytest.raises(KittiFormatError, match="short by 7"):
        load_kitti(tmp_path, (0, 10))
    lines = (tmp_path / "poses.txt").read_text().splitlines()
    (tmp_path / "poses.txt").write_text("\n".join(lines[:2]) + "\n")
    with pytest.raises(KittiFormatError, match="3 images but 2 pose lines"):
        load_kitti(tmp_path)
    (tmp_path / "poses.txt").write_text("\n".join(lines[:2] + ["1 0 0 0 0 1 0 0 0 0 1 zz"]) + "\n")
    with pytest.raises(KittiFormatError, match="line 3"):
        load_kitti(tmp_path)


def test_intrinsics_checked():
    with pytest.raises(ValueError):
        render_sequence(dataclasses.replace(small_seq(), cx=500.0), np.random.default_rng(0))
