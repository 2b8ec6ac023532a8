import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featureness import datagen
from featureness.features import (
    Keypoints, brief_describe, distance_matrix, fast_corner_map, fast_detect, learned_detect_describe,
    match, min_eigenvalue_map, nms_points, shi_tomasi, structure_tensor, write_keypoints_csv,
    write_matches_csv,
)
from featureness.nn import Model

# Bresenham circle of radius 3, clockwise from 12 o'clock, (dx, dy)
RING = [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]


def brute_fast(img, t, arc=9):
    """Segment test by explicit loops; returns the SAD score of the best qualifying arc."""
    h, w = img.shape
    score = np.zeros((h, w))
    for y in range(3, h - 3):
        for x in range(3, w - 3):
            c = img[y, x]
            ring = [img[y + dy, x + dx] for dx, dy in RING]
            best = 0.0
            for sign in (1, -1):
                flags = [(sign * (v - c)) > t for v in ring]
                for start in range(16):
                    n = 0
                    while n < 16 and flags[(start + n) % 16]:
                        n += 1
                    if n >= arc and (n == 16 or not flags[(start - 1) % 16]):
                        sad = sum(abs(ring[(start + k) % 16] - c) for k in range(n))
                        best = max(best, sad)
            score[y, x] = best
    return score


def square_image():
    img = np.full((64, 64), 0.1, np.float32)
    img[20:40, 22:42] = 0.9
    return img


def test_fast_uniform_and_unreachable_threshold():
    assert len(fast_detect(np.full((40, 40), 0.5, np.float32))) == 0
    img = datagen.gen_texture_image(np.random.default_rng(0))
    assert len(fast_detect(img, threshold=1.0)) == 0


def test_fast_square_has_four_corners():
    kps = fast_detect(square_image(), 0.08, 5)
    assert len(kps) == 4
    corners = np.array([[22, 20], [41, 20], [22, 39], [41, 39]])
    for c in corners:
        assert np.abs(kps.xy - c).max(axis=1).min() <= 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fast_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    img = datagen.gen_texture_image(rng, (64, 64))
    if seed == 2:
        img = rng.random((64, 64)).astype(np.float32)
    ref = brute_fast(img.astype(np.float64), 0.08)
    got = fast_corner_map(img, 0.08)
    assert np.array_equal(got, ref > 0)
    from featureness import kernels
    assert np.allclose(kernels.fast_score(img.astype(np.float64), 0.08, 9), ref, atol=1e-12)


def test_nms_separation_and_order():
    rng = np.random.default_rng(0)
    score = rng.random((30, 30))
    xy = nms_points(score, 2)
    d = np.abs(xy[:, None, :] - xy[None, :, :]).max(-1)
    np.fill_diagonal(d, 99)
    assert d.min() > 2
    s = score[xy[:, 1], xy[:, 0]]
    assert np.all(np.diff(s) <= 0)
    assert tuple(xy[0]) == tuple(np.unravel_index(score.argmax(), score.shape)[::-1])


def test_shi_tomasi_constant_image():
    img = np.full((30, 30), 0.4, np.float32)
    assert np.all(min_eigenvalue_map(img) == 0)
    assert len(shi_tomasi(img)) == 0


def test_shi_tomasi_matches_eigen_oracle():
    img = datagen.gen_texture_image(np.random.default_rng(3), (40, 40))
    lam = min_eigenvalue_map(img, 2)
    gy, gx = np.gradient(img.astype(np.float64))
    gxp, gyp = np.pad(gx, 2), np.pad(gy, 2)
    for y in range(40):
        for x in range(40):
            wx = gxp[y:y + 5, x:x + 5].ravel()
            wy = gyp[y:y + 5, x:x + 5].ravel()
            m = np.array([[wx @ wx, wx @ wy], [wx @ wy, wy @ wy]])
            assert lam[y, x] == pytest.approx(max(np.linalg.eigvalsh(m)[0], 0.0), abs=1e-6)
    assert lam.min() >= 0


def test_shi_tomasi_corner_beats_edges():
    img = np.zeros((40, 40), np.float32)
    img[20:, 20:] = 1.0
    lam = min_eigenvalue_map(img, 2)
    corner = lam[18:22, 18:22].max()
    edge = max(lam[30, 17:23].max(), lam[17:23, 30].max())
    assert edge < 1e-12 < corner
    kps = shi_tomasi(img, 2)
    assert np.abs(kps.xy[0] - [19.5, 19.5]).max() <= 1.5


def test_structure_tensor_window_arg():
    with pytest.raises(ValueError):
        shi_tomasi(np.zeros((20, 20), np.float32), w=0)
    a, b, c = structure_tensor(np.zeros((10, 12), np.float32), 1)
    assert a.shape == (10, 12)


def test_brief_determinism_shift_invariance_and_border():
    img = datagen.gen_texture_image(np.random.default_rng(1), (64, 64)) * 0.8
    kps = Keypoints(np.array([[32.0, 32.0], [5.0, 30.0], [40.0, 20.0]]), np.ones(3))
    d1, keep = brief_describe(img, kps)
    d2, _ = brief_describe(img, kps)
    d3, _ = brief_describe(img + 0.1, kps)
    assert keep.tolist() == [0, 2]
    assert d1.shape == (2, 32) and d1.dtype == np.uint8
    assert np.array_equal(d1, d2) and np.array_equal(d1, d3)


def test_brief_hamming_on_independent_noise():
    rng = np.random.default_rng(0)
    kps = Keypoints(np.array([[x, y] for x in range(20, 44, 4) for y in range(20, 44, 4)], float), np.ones(36))
    dists = []
    for _ in range(5):
        a, _ = brief_describe(rng.random((64, 64)).astype(np.float32), kps)
        b, _ = brief_describe(rng.random((64, 64)).astype(np.float32), kps)
        dists.extend(np.unpackbits(a ^ b, axis=1).sum(1))
    assert abs(np.mean(dists) - 128) <= 20


def test_learned_top1_and_separation():
    m = Model(seed=0)
    img = datagen.gen_texture_image(np.random.default_rng(0), (48, 48))
    prob = m.forward(img)["prob"][0]
    kps, desc = learned_detect_describe(m, img, top_n=1)
    assert tuple(kps.xy[0].astype(int)) == tuple(np.unravel_index(prob.argmax(), prob.shape)[::-1])
    kps, desc = learned_detect_describe(m, img, top_n=100, nms_radius=2)
    assert len(kps) == 100
    d = np.abs(kps.xy[:, None] - kps.xy[None]).max(-1)
    np.fill_diagonal(d, 99)
    assert d.min() > 2
    assert np.allclose(np.linalg.norm(desc, axis=1), 1, atol=1e-5)


def test_match_identity_and_ties():
    rng = np.random.default_rng(0)
    d = rng.integers(0, 256, (50, 32), dtype=np.uint8)
    m = match(d, d.copy())
    assert m.ia.tolist() == list(range(50)) and m.ib.tolist() == list(range(50))
    a = np.array([[0.0, 0.0]], np.float32)
    b = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
    assert match(a, b, mutual=False).ib.tolist() == [0]


def test_match_mixed_kinds_rejected():
    with pytest.raises(TypeError):
        match(np.zeros((2, 32), np.uint8), np.zeros((2, 32), np.float32))


def test_match_planted_duplicates_vs_oracle():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 256, (100, 32), dtype=np.uint8)
    b = rng.integers(0, 256, (100, 32), dtype=np.uint8)
    plant = rng.choice(100, 20, replace=False)
    target = rng.choice(100, 20, replace=False)
    b[target] = a[plant]
    m = match(a, b)
    bits = lambda x, y: int(np.unpackbits(x ^ y).sum())
    oracle = np.array([[bits(x, y) for y in b] for x in a])
    assert np.array_equal(distance_matrix(a, b), oracle)
    found = dict(zip(m.ia.tolist(), m.ib.tolist()))
    for p, t in zip(plant, target):
        assert found[p] == t


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_mutual_matching_is_one_to_one(seed, binary):
    rng = np.random.default_rng(seed)
    if binary:
        a = rng.integers(0, 4, (30, 2), dtype=np.uint8)
        b = rng.integers(0, 4, (25, 2), dtype=np.uint8)
    else:
        a = rng.integers(0, 3, (30, 2)).astype(np.float32)
        b = rng.integers(0, 3, (25, 2)).astype(np.float32)
    m = match(a, b, mutual=True)
    assert len(set(m.ia.tolist())) == len(m) and len(set(m.ib.tolist())) == len(m)
    assert np.all(m.distance >= 0)


def test_ratio_test_filters_ambiguous():
    a = np.array([[0.0, 0.0], [5.0, 5.0]], np.float32)
    b = np.array([[0.1, 0.0], [0.0, 0.12], [5.0, 5.0]], np.float32)
    m = match(a, b, mutual=False, ratio=0.8)
    assert m.ia.tolist() == [1]


def test_csv_exports(tmp_path):
    kps = Keypoints(np.array([[1.5, 2.0]]), np.array([0.25]))
    write_keypoints_csv(tmp_path / "k.csv", kps)
    assert (tmp_path / "k.csv").read_text().splitlines() == ["x,y,score", "1.500000,2.000000,0.250000"]
    from featureness.features import Matches
    write_matches_csv(tmp_path / "m.csv", Matches(np.array([0]), np.array([3]), np.array([7.0])))
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "i,j,distance"
